#include "ragopt/harness.hpp"

#include <cstdio>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "ragopt/error.hpp"
#include "ragopt/io.hpp"
#include "ragopt/rng.hpp"

namespace ragopt {

using nlohmann::json;

void RunConfig::validate() const {
    if (!(tau > 0.0)) throw ValidationError("tau must be positive");
    if (batch_size < 2) throw ValidationError("batch_size must be at least 2");
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw ValidationError("gamma must lie in [0, 1]");
    if (!(lambda >= 0.0)) throw ValidationError("lambda must be non-negative");
    GateConfig{threshold, mode}.validate();
    if (k == 0) throw ValidationError("k must be at least 1");
    if (mc_passes == 0) throw ValidationError("mc_passes must be at least 1");
    if (dimension == 0) throw ValidationError("dimension must be positive");
    if (train_per_faq == 0 || heldout_per_faq == 0) throw ValidationError("paraphrase counts must be positive");
    if (!(margin > 0.0)) throw ValidationError("margin must be positive");
    if (policy_samples == 0 || policy_rounds == 0) throw ValidationError("policy rounds and samples must be positive");
    if (policy_batch == 0) throw ValidationError("policy_batch must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ValidationError("dropout must lie in [0, 1)");
    rewards.validate();
}

namespace {

HeadLoss parse_loss(std::string_view s) {
    if (s == "infonce" || s == "INFONCE") return HeadLoss::InfoNce;
    if (s == "triplet" || s == "TRIPLET") return HeadLoss::Triplet;
    throw ValidationError("unknown loss '" + std::string(s) + "'");
}

std::string_view loss_name(HeadLoss l) { return l == HeadLoss::InfoNce ? "infonce" : "triplet"; }

template <typename T>
void take(const json& doc, const char* key, T& field) {
    if (auto it = doc.find(key); it != doc.end()) field = it->get<T>();
}

void take_path(const json& doc, const char* key, std::filesystem::path& field) {
    if (auto it = doc.find(key); it != doc.end()) field = it->get<std::string>();
}

void require_file(const std::filesystem::path& p, std::string_view what) {
    if (!std::filesystem::is_regular_file(p)) throw ValidationError(std::string(what) + " not found: '" + p.string() + "'");
}

}  // namespace

RunConfig parse_run_config(std::string_view json_text, RunConfig c) {
    json doc;
    try {
        doc = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw ParseError(std::string("config file: ") + e.what());
    }
    if (!doc.is_object()) throw ParseError("config file: top level must be an object");
    try {
        take_path(doc, "corpus", c.corpus);
        take_path(doc, "train_sessions", c.train_sessions);
        take_path(doc, "test_sessions", c.test_sessions);
        take_path(doc, "ood_queries", c.ood_queries);
        take_path(doc, "embeddings", c.embeddings);
        take_path(doc, "head", c.head);
        take_path(doc, "policy", c.policy);
        take_path(doc, "out_dir", c.out_dir);
        take(doc, "tau", c.tau);
        take(doc, "batch_size", c.batch_size);
        take(doc, "gamma", c.gamma);
        take(doc, "lambda", c.lambda);
        take(doc, "threshold", c.threshold);
        take(doc, "k", c.k);
        take(doc, "mc_passes", c.mc_passes);
        take(doc, "seed", c.seed);
        if (auto it = doc.find("mode"); it != doc.end()) c.mode = parse_gate_mode(it->get<std::string>());
        take(doc, "dimension", c.dimension);
        take(doc, "embed_epochs", c.embed_epochs);
        take(doc, "embed_lr", c.embed_lr);
        if (auto it = doc.find("loss"); it != doc.end()) c.loss = parse_loss(it->get<std::string>());
        take(doc, "margin", c.margin);
        take(doc, "train_per_faq", c.train_per_faq);
        take(doc, "heldout_per_faq", c.heldout_per_faq);
        take(doc, "hinglish", c.hinglish);
        take(doc, "policy_rounds", c.policy_rounds);
        take(doc, "policy_samples", c.policy_samples);
        take(doc, "policy_epochs", c.policy_epochs);
        take(doc, "policy_lr", c.policy_lr);
        take(doc, "policy_batch", c.policy_batch);
        take(doc, "dropout", c.dropout);
        if (auto it = doc.find("rewards"); it != doc.end()) {
            take(*it, "fetch_reward", c.rewards.fetch_reward);
            take(*it, "no_fetch_good", c.rewards.no_fetch_good);
            take(*it, "no_fetch_bad", c.rewards.no_fetch_bad);
        }
    } catch (const json::type_error& e) {
        throw ParseError(std::string("config file: ") + e.what());
    }
    return c;
}

RunConfig load_run_config(const std::filesystem::path& path, RunConfig base) { return parse_run_config(read_file(path), std::move(base)); }

std::string run_config_to_json(const RunConfig& c) {
    json doc = {{"corpus", c.corpus.string()},
                {"train_sessions", c.train_sessions.string()},
                {"test_sessions", c.test_sessions.string()},
                {"ood_queries", c.ood_queries.string()},
                {"embeddings", c.embeddings.string()},
                {"head", c.head_path().string()},
                {"policy", c.policy_path().string()},
                {"out_dir", c.out_dir.string()},
                {"tau", c.tau},
                {"batch_size", c.batch_size},
                {"gamma", c.gamma},
                {"lambda", c.lambda},
                {"threshold", c.threshold},
                {"k", c.k},
                {"mc_passes", c.mc_passes},
                {"seed", c.seed},
                {"mode", std::string(to_string(c.mode))},
                {"dimension", c.dimension},
                {"embed_epochs", c.embed_epochs},
                {"embed_lr", c.embed_lr},
                {"loss", std::string(loss_name(c.loss))},
                {"margin", c.margin},
                {"train_per_faq", c.train_per_faq},
                {"heldout_per_faq", c.heldout_per_faq},
                {"hinglish", c.hinglish},
                {"policy_rounds", c.policy_rounds},
                {"policy_samples", c.policy_samples},
                {"policy_epochs", c.policy_epochs},
                {"policy_lr", c.policy_lr},
                {"policy_batch", c.policy_batch},
                {"dropout", c.dropout},
                {"rewards", {{"fetch_reward", c.rewards.fetch_reward}, {"no_fetch_good", c.rewards.no_fetch_good}, {"no_fetch_bad", c.rewards.no_fetch_bad}}}};
    return doc.dump(2) + "\n";
}

World::World(FaqCorpus corpus, EmbeddingStore store, ProjectionHead head, const RunConfig& config)
    : corpus_(std::move(corpus)), store_(std::move(store)), head_(std::move(head)), llm_(corpus_), evaluator_(corpus_) {
    retriever_ = std::make_unique<Retriever>(store_, head_, corpus_);
    components_.corpus = &corpus_;
    components_.retriever = retriever_.get();
    components_.llm = &llm_;
    components_.evaluator = &evaluator_;
    components_.rewards = config.rewards;
    components_.k = std::min(config.k, corpus_.size());
}

EmbeddingStore make_store(const RunConfig& config) {
    if (config.embeddings.empty()) return EmbeddingStore(TrigramHasher{TrigramHasher{}.seed, config.dimension});
    require_file(config.embeddings, "embedding fixture");
    return EmbeddingStore::load(config.embeddings);
}

std::unique_ptr<World> make_world(const RunConfig& config) {
    config.validate();
    require_file(config.corpus, "FAQ file");
    require_file(config.head_path(), "trained head (run embed-train first)");
    auto head = load_head(config.head_path());
    head.tau = config.tau;
    head.batch_size = config.batch_size;
    return std::make_unique<World>(load_corpus(config.corpus), make_store(config), std::move(head), config);
}

std::vector<std::string> load_text_list(const std::filesystem::path& path) {
    require_file(path, "query list");
    json doc;
    try {
        doc = json::parse(read_file(path));
    } catch (const json::parse_error& e) {
        throw ParseError("query list: " + std::string(e.what()));
    }
    if (!doc.is_array()) throw ParseError("query list: top level must be an array of strings");
    std::vector<std::string> out;
    for (const auto& v : doc) {
        if (!v.is_string()) throw ParseError("query list: entries must be strings");
        out.push_back(v.get<std::string>());
    }
    return out;
}

EmbeddingData make_embedding_data(const FaqCorpus& corpus, const RunConfig& config) {
    const SynthOptions opts{config.hinglish};
    EmbeddingData d;
    d.train = synth_paraphrases(corpus, config.train_per_faq, derive_seed(config.seed, {0x7a1}), opts);
    std::set<std::string> seen;
    for (const auto& p : d.train) seen.insert(p.query);
    for (const auto& p : synth_paraphrases(corpus, config.heldout_per_faq, derive_seed(config.seed, {0x4e1d}), opts))
        if (seen.insert(p.query).second) d.heldout.push_back({p.query, p.faq_id});
    return d;
}

namespace {

std::string fmt(double v, int digits = 3) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

json metrics_json(const RetrievalMetrics& m) { return {{"top1", m.top1}, {"top3", m.top3}}; }
json ood_json(const OodSeparation& s) { return {{"mean_top1_in", s.mean_top1_in}, {"mean_top1_ood", s.mean_top1_ood}, {"gap", s.gap()}}; }

void print_embed_report(const EmbedReport& r, std::ostream& out) {
    out << "loss: " << r.loss_name << "  train pairs: " << r.train_pairs << "  held-out queries: " << r.heldout_queries << "\n";
    out << "             top-1   top-3   in-domain   OOD     gap\n";
    out << "  before     " << fmt(r.before.top1) << "   " << fmt(r.before.top3) << "   " << fmt(r.ood_before.mean_top1_in) << "       "
        << fmt(r.ood_before.mean_top1_ood) << "   " << fmt(r.ood_before.gap()) << "\n";
    out << "  after      " << fmt(r.after.top1) << "   " << fmt(r.after.top3) << "   " << fmt(r.ood_after.mean_top1_in) << "       "
        << fmt(r.ood_after.mean_top1_ood) << "   " << fmt(r.ood_after.gap()) << "\n";
}

std::vector<std::string> heldout_texts(const EmbeddingData& d) {
    std::vector<std::string> out;
    out.reserve(d.heldout.size());
    for (const auto& q : d.heldout) out.push_back(q.text);
    return out;
}

}  // namespace

EmbedReport cmd_embed_train(const RunConfig& config, std::ostream& out) {
    config.validate();
    require_file(config.corpus, "FAQ file");
    const auto corpus = load_corpus(config.corpus);
    const auto ood = load_text_list(config.ood_queries);
    const auto store = make_store(config);
    const auto data = make_embedding_data(corpus, config);
    const auto in_domain = heldout_texts(data);

    const auto initial = ProjectionHead::identity(store.dimension(), config.tau, config.batch_size);
    EmbedReport r;
    r.loss_name = std::string(loss_name(config.loss));
    r.train_pairs = data.train.size();
    r.heldout_queries = data.heldout.size();
    r.before = eval_retrieval(store, initial, corpus, data.heldout);
    r.ood_before = ood_separation(store, initial, corpus, in_domain, ood);

    const HeadTrainConfig tc{config.embed_epochs, config.embed_lr, config.loss, config.seed, config.margin};
    auto trained = train_head(initial, data.train, store, corpus, tc);
    r.loss_trace = trained.loss_trace;
    r.after = eval_retrieval(store, trained.head, corpus, data.heldout);
    r.ood_after = ood_separation(store, trained.head, corpus, in_domain, ood);

    save_head(config.head_path(), trained.head);
    json doc = {{"loss", r.loss_name},
                {"train_pairs", r.train_pairs},
                {"heldout_queries", r.heldout_queries},
                {"before", metrics_json(r.before)},
                {"after", metrics_json(r.after)},
                {"ood_before", ood_json(r.ood_before)},
                {"ood_after", ood_json(r.ood_after)},
                {"loss_trace", r.loss_trace}};
    write_file_atomic(config.out_dir / "embed_report.json", doc.dump(2) + "\n");
    print_embed_report(r, out);
    out << "wrote " << config.head_path().string() << "\n";
    return r;
}

EmbedReport cmd_embed_eval(const RunConfig& config, std::ostream& out) {
    config.validate();
    require_file(config.corpus, "FAQ file");
    const auto corpus = load_corpus(config.corpus);
    const auto ood = load_text_list(config.ood_queries);
    const auto store = make_store(config);
    const auto data = make_embedding_data(corpus, config);
    const auto in_domain = heldout_texts(data);
    const auto identity = ProjectionHead::identity(store.dimension(), config.tau, config.batch_size);
    const bool have_head = std::filesystem::is_regular_file(config.head_path());
    const auto head = have_head ? load_head(config.head_path()) : identity;

    EmbedReport r;
    r.loss_name = have_head ? "saved head" : "identity";
    r.heldout_queries = data.heldout.size();
    r.before = eval_retrieval(store, identity, corpus, data.heldout);
    r.ood_before = ood_separation(store, identity, corpus, in_domain, ood);
    r.after = eval_retrieval(store, head, corpus, data.heldout);
    r.ood_after = ood_separation(store, head, corpus, in_domain, ood);
    out << "(before = identity projection, after = " << r.loss_name << ")\n";
    print_embed_report(r, out);
    return r;
}

PolicyTraining train_policy_on_sessions(std::span<const SessionScript> sessions, Components& components, const RunConfig& config) {
    if (sessions.empty()) throw InsufficientData("policy training needs at least one session");
    PolicyTraining t{PolicyNet::init(config.seed, config.dropout), {}, {}};
    for (std::size_t round = 0; round < config.policy_rounds; ++round) {
        auto trajs = generate_rollouts(sessions, t.net, config.policy_samples, derive_seed(config.seed, {0x70, round}), components, config.gamma);
        double total = 0.0;
        std::size_t n = 0;
        for (const auto& tr : trajs)
            for (const auto& st : tr.steps) {
                total += st.reward;
                ++n;
            }
        t.report.mean_reward_per_round.push_back(n ? total / static_cast<double>(n) : 0.0);
        t.report.tuples += n;
        const PolicyTrainConfig pc{config.policy_epochs, config.policy_lr, config.lambda, config.gamma, config.policy_batch,
                                   derive_seed(config.seed, {0x71, round})};
        auto trained = train_policy(t.net, trajs, pc);
        t.net = trained.net;
        t.report.loss_trace.insert(t.report.loss_trace.end(), trained.loss_trace.begin(), trained.loss_trace.end());
        t.trajectories.insert(t.trajectories.end(), std::make_move_iterator(trajs.begin()), std::make_move_iterator(trajs.end()));
    }
    return t;
}

PolicyTrainReport cmd_policy_train(const RunConfig& config, std::ostream& out) {
    auto world = make_world(config);
    require_file(config.train_sessions, "training session file");
    const auto sessions = load_sessions(config.train_sessions, world->corpus());
    auto t = train_policy_on_sessions(sessions, world->components(), config);

    save_policy(config.policy_path(), t.net);
    write_file_atomic(config.out_dir / "rollouts.jsonl", trajectories_to_jsonl(t.trajectories));
    json trace = {{"tuples", t.report.tuples}, {"loss_trace", t.report.loss_trace}, {"mean_reward_per_round", t.report.mean_reward_per_round}};
    write_file_atomic(config.out_dir / "policy_trace.json", trace.dump(2) + "\n");

    out << "sessions: " << sessions.size() << "  rounds: " << config.policy_rounds << "  tuples: " << t.report.tuples << "\n";
    for (std::size_t r = 0; r < t.report.mean_reward_per_round.size(); ++r)
        out << "  round " << r << " mean reward " << fmt(t.report.mean_reward_per_round[r]) << "\n";
    out << "wrote " << config.policy_path().string() << "\n";
    return t.report;
}

std::string trace_to_json(const std::vector<TraceRow>& trace) {
    json rows = json::array();
    for (const auto& t : trace) {
        json row = {{"session_id", t.session_id},
                    {"step", t.step},
                    {"query", t.query},
                    {"kind", std::string(to_string(t.kind))},
                    {"route", std::string(to_string(t.route))},
                    {"top1_faq", t.top1.faq_id},
                    {"top1_score", t.top1.score},
                    {"input_tokens", t.input_tokens},
                    {"output_tokens", t.output_tokens},
                    {"verdict", std::string(to_string(t.rating.verdict))},
                    {"reason", t.rating.reason}};
        if (t.policy_probs) {
            row["p_fetch"] = t.policy_probs->first;
            row["p_no_fetch"] = t.policy_probs->second;
        }
        rows.push_back(std::move(row));
    }
    return rows.dump(2) + "\n";
}

namespace {

std::string mode_slug(GateMode m) {
    std::string s(to_string(m));
    for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

std::optional<PolicyNet> maybe_policy(const RunConfig& config, bool required) {
    if (!std::filesystem::is_regular_file(config.policy_path())) {
        if (required) throw ValidationError("trained policy not found: '" + config.policy_path().string() + "' (run policy-train first)");
        return std::nullopt;
    }
    return load_policy(config.policy_path());
}

std::string render_trace_table(const std::vector<TraceRow>& trace) {
    std::ostringstream out;
    out << "step  route     p_fetch  top1   verdict  query\n";
    for (const auto& t : trace) {
        out << std::left << std::setw(6) << t.step << std::setw(10) << to_string(t.route)
            << std::setw(9) << (t.policy_probs ? fmt(t.policy_probs->first) : std::string("-")) << std::setw(7) << fmt(t.top1.score, 2)
            << std::setw(9) << to_string(t.rating.verdict) << t.query << "\n";
    }
    return out.str();
}

}  // namespace

SettingResult cmd_simulate(const RunConfig& config, std::ostream& out) {
    auto world = make_world(config);
    require_file(config.test_sessions, "test session file");
    const auto sessions = load_sessions(config.test_sessions, world->corpus());
    const GateConfig gate{config.threshold, config.mode};
    const auto net = maybe_policy(config, gate.uses_policy());
    const PolicyDriver driver{net ? &*net : nullptr, PolicyMode::McGreedy, config.seed, config.mc_passes};
    auto res = evaluate_setting(sessions, gate, net ? &driver : nullptr, world->components());

    const std::string slug = mode_slug(config.mode);
    write_file_atomic(config.out_dir / ("ledger_" + slug + ".csv"), res.ledger.to_csv());
    write_file_atomic(config.out_dir / ("trace_" + slug + ".json"), trace_to_json(res.trace));
    out << render_trace_table(res.trace);
    out << res.setting << ": input tokens " << res.tokens << ", output tokens " << res.output_tokens << ", accuracy " << fmt(res.accuracy) << "\n";
    return res;
}

std::string render_report_table(const Report& report) {
    std::ostringstream out;
    out << std::left << std::setw(16) << "Setting" << std::setw(12) << "# tokens" << std::setw(10) << "saving" << "Acc." << "\n";
    for (const auto& s : report.settings) {
        const std::string saving = s.setting == "ALL_FETCH" ? "-" : fmt(100.0 * s.saving, 1) + "%";
        out << std::left << std::setw(16) << s.setting << std::setw(12) << s.tokens << std::setw(10) << saving << fmt(s.accuracy) << "\n";
    }
    return out.str();
}

std::string report_to_json(const Report& report) {
    json rows = json::array();
    for (const auto& s : report.settings)
        rows.push_back({{"setting", s.setting}, {"tokens", s.tokens}, {"output_tokens", s.output_tokens}, {"saving", s.saving}, {"accuracy", s.accuracy}});
    json doc = {{"settings", rows}};
    if (!report.settings.empty()) doc["trace"] = json::parse(trace_to_json(report.settings.back().trace));
    return doc.dump(2) + "\n";
}

Report cmd_report(const RunConfig& config, std::ostream& out) {
    auto world = make_world(config);
    require_file(config.test_sessions, "test session file");
    const auto sessions = load_sessions(config.test_sessions, world->corpus());
    const auto net = maybe_policy(config, true);
    const PolicyDriver driver{&*net, PolicyMode::McGreedy, config.seed, config.mc_passes};

    Report report;
    for (GateMode m : {GateMode::AllFetch, GateMode::SimThr, GateMode::SimThrPolicy}) {
        const GateConfig gate{config.threshold, m};
        report.settings.push_back(evaluate_setting(sessions, gate, gate.uses_policy() ? &driver : nullptr, world->components()));
    }
    const double base = static_cast<double>(report.settings.front().tokens);
    for (auto& s : report.settings) s.saving = base > 0.0 ? 1.0 - static_cast<double>(s.tokens) / base : 0.0;

    for (const auto& s : report.settings) write_file_atomic(config.out_dir / ("ledger_" + mode_slug(parse_gate_mode(s.setting)) + ".csv"), s.ledger.to_csv());
    const std::string table = render_report_table(report);
    write_file_atomic(config.out_dir / "report.json", report_to_json(report));
    write_file_atomic(config.out_dir / "report.txt", table + "\n" + render_trace_table(report.settings.back().trace));
    out << table << "\n" << render_trace_table(report.settings.back().trace);
    return report;
}

void cmd_repl(const RunConfig& config, std::istream& in, std::ostream& out) {
    auto world = make_world(config);
    const GateConfig gate{config.threshold, config.mode};
    const auto net = maybe_policy(config, gate.uses_policy());
    const PolicyDriver driver{net ? &*net : nullptr, PolicyMode::McGreedy, config.seed, config.mc_passes};

    // Scripted steps from the test and training files give the oracle its ground truth.
    std::vector<SessionScript> scripts;
    for (const auto& p : {config.test_sessions, config.train_sessions})
        if (std::filesystem::is_regular_file(p)) {
            auto s = load_sessions(p, world->corpus());
            scripts.insert(scripts.end(), s.begin(), s.end());
        }
    auto lookup = [&](const std::string& q) -> std::optional<StepTruth> {
        for (const auto& s : scripts)
            for (std::size_t i = 0; i < s.steps.size(); ++i)
                if (s.steps[i].text == q) return truth_for(s, i);
        return std::nullopt;
    };

    EnvState env;
    out << "ragopt repl (" << to_string(gate.mode) << "); type 'exit' to quit\n";
    std::string line;
    while (out << "> " << std::flush, std::getline(in, line)) {
        const auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos) {
            out << "(empty query ignored)\n";
            continue;
        }
        const auto last = line.find_last_not_of(" \t\r");
        const std::string query = line.substr(first, last - first + 1);
        if (query == "exit") break;
        try {
            const std::size_t before = env.ledger.total();
            auto r = run_step(env, query, lookup(query), gate, net ? &driver : nullptr, world->components(), RatingPolicy::Every);
            out << "route: " << to_string(r.decision.route) << "  top1: " << r.decision.top1.faq_id << " (" << fmt(r.decision.top1.score) << ")";
            if (r.decision.policy_probs)
                out << "  p_fetch: " << fmt(r.decision.policy_probs->first) << "  p_no_fetch: " << fmt(r.decision.policy_probs->second);
            out << "\ntokens: +" << r.ledger_entry.input_tokens << " in, +" << r.ledger_entry.output_tokens << " out (total "
                << env.ledger.total() << ", delta " << env.ledger.total() - before << ")\n";
            if (r.rating) out << "rating: " << to_string(r.rating->verdict) << " - " << r.rating->reason << "\n";
            out << "bot: " << r.answer << "\n";
        } catch (const Error& e) {
            out << "error: " << e.what() << "\n";
        }
    }
    out << "bye\n";
}

}  // namespace ragopt
