#include "ragopt/corpus.hpp"

#include <algorithm>
#include <map>
#include <set>
#include <unordered_map>
#include <unordered_set>

#include "json.hpp"
#include "ragopt/error.hpp"
#include "ragopt/io.hpp"
#include "ragopt/rng.hpp"
#include "ragopt/text.hpp"

namespace ragopt {

using nlohmann::json;

FaqCorpus::FaqCorpus(std::string name, std::vector<FaqEntry> entries)
    : name_(std::move(name)), entries_(std::move(entries)) {
    if (entries_.empty()) throw ValidationError("corpus '" + name_ + "' has no entries");
    std::unordered_set<std::string> seen;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        const auto& e = entries_[i];
        if (e.id.empty()) throw ValidationError("FAQ record " + std::to_string(i) + " has an empty id");
        if (e.question.empty()) throw ValidationError("FAQ '" + e.id + "' has an empty question");
        if (e.answer.empty()) throw ValidationError("FAQ '" + e.id + "' has an empty answer");
        if (!seen.insert(e.id).second) throw ValidationError("duplicate FAQ id '" + e.id + "'");
    }
}

const FaqEntry* FaqCorpus::find(std::string_view id) const {
    for (const auto& e : entries_)
        if (e.id == id) return &e;
    return nullptr;
}

const FaqEntry& FaqCorpus::at(std::string_view id) const {
    if (const auto* e = find(id)) return *e;
    throw ValidationError("unknown FAQ id '" + std::string(id) + "'");
}

std::string_view to_string(StepKind k) {
    switch (k) {
        case StepKind::Domain: return "DOMAIN";
        case StepKind::Followup: return "FOLLOWUP";
        case StepKind::Ood: return "OOD";
        case StepKind::Greeting: return "GREETING";
    }
    return "DOMAIN";
}

StepKind parse_step_kind(std::string_view s) {
    if (s == "DOMAIN") return StepKind::Domain;
    if (s == "FOLLOWUP") return StepKind::Followup;
    if (s == "OOD") return StepKind::Ood;
    if (s == "GREETING") return StepKind::Greeting;
    throw ParseError("unknown step kind '" + std::string(s) + "'");
}

namespace {

json parse_json(std::string_view text, std::string_view what) {
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        throw ParseError(std::string(what) + ": " + e.what());
    }
}

std::string required_string(const json& obj, const char* key, const std::string& where) {
    auto it = obj.find(key);
    if (it == obj.end() || !it->is_string()) throw ParseError(where + ": missing string field '" + key + "'");
    return it->get<std::string>();
}

}  // namespace

FaqCorpus parse_corpus(std::string_view json_text, std::string name) {
    json doc = parse_json(json_text, "FAQ file");
    if (!doc.is_array()) throw ParseError("FAQ file: top level must be an array");
    std::vector<FaqEntry> entries;
    for (std::size_t i = 0; i < doc.size(); ++i) {
        const auto& rec = doc[i];
        std::string where = "FAQ record " + std::to_string(i);
        if (!rec.is_object()) throw ParseError(where + ": not an object");
        entries.push_back({required_string(rec, "id", where), required_string(rec, "question", where),
                           required_string(rec, "answer", where)});
    }
    return FaqCorpus(std::move(name), std::move(entries));
}

FaqCorpus load_corpus(const std::filesystem::path& path) {
    return parse_corpus(read_file(path), path.stem().string());
}

std::string corpus_to_json(const FaqCorpus& corpus) {
    json doc = json::array();
    for (const auto& e : corpus.entries()) doc.push_back({{"id", e.id}, {"question", e.question}, {"answer", e.answer}});
    return doc.dump(2) + "\n";
}

void write_corpus(const std::filesystem::path& path, const FaqCorpus& corpus) {
    write_file_atomic(path, corpus_to_json(corpus));
}

void validate_session(const SessionScript& session, const FaqCorpus& corpus) {
    const std::string where = "session '" + session.id + "'";
    if (session.id.empty()) throw ValidationError("session with empty id");
    if (session.steps.empty()) throw ValidationError(where + " has no steps");
    for (std::size_t i = 0; i < session.steps.size(); ++i) {
        const auto& st = session.steps[i];
        const std::string at = where + " step " + std::to_string(i);
        if (st.text.empty()) throw ValidationError(at + " has empty text");
        const bool needs_target = st.kind == StepKind::Domain || st.kind == StepKind::Followup;
        if (needs_target && !st.target_faq_id) throw ValidationError(at + " (" + std::string(to_string(st.kind)) + ") lacks target_faq_id");
        if (!needs_target && st.target_faq_id) throw ValidationError(at + " (" + std::string(to_string(st.kind)) + ") must not carry target_faq_id");
        if (st.target_faq_id && !corpus.contains(*st.target_faq_id))
            throw ValidationError(at + " references unknown FAQ '" + *st.target_faq_id + "'");
        if (st.depends_on && *st.depends_on >= i)
            throw ValidationError(at + " depends_on " + std::to_string(*st.depends_on) + " is not a strictly earlier step");
        if (st.kind == StepKind::Followup) {
            if (!st.depends_on) throw ValidationError(at + " is a FOLLOWUP without depends_on");
            // Walk the chain down to a DOMAIN root.
            std::size_t cur = *st.depends_on;
            while (session.steps[cur].kind == StepKind::Followup) cur = *session.steps[cur].depends_on;
            if (session.steps[cur].kind != StepKind::Domain)
                throw ValidationError(at + " dependency chain does not end at a DOMAIN step");
        }
    }
}

std::vector<SessionScript> parse_sessions(std::string_view json_text, const FaqCorpus& corpus) {
    json doc = parse_json(json_text, "session file");
    if (!doc.is_array()) throw ParseError("session file: top level must be an array");
    std::vector<SessionScript> out;
    for (std::size_t i = 0; i < doc.size(); ++i) {
        const auto& rec = doc[i];
        std::string where = "session record " + std::to_string(i);
        if (!rec.is_object()) throw ParseError(where + ": not an object");
        SessionScript s;
        s.id = required_string(rec, "id", where);
        auto steps = rec.find("steps");
        if (steps == rec.end() || !steps->is_array()) throw ParseError(where + ": missing array 'steps'");
        for (std::size_t j = 0; j < steps->size(); ++j) {
            const auto& js = (*steps)[j];
            std::string sw = where + " step " + std::to_string(j);
            if (!js.is_object()) throw ParseError(sw + ": not an object");
            QueryStep st;
            st.text = required_string(js, "text", sw);
            st.kind = parse_step_kind(required_string(js, "kind", sw));
            if (auto t = js.find("target_faq_id"); t != js.end() && !t->is_null()) {
                if (!t->is_string()) throw ParseError(sw + ": target_faq_id must be a string");
                st.target_faq_id = t->get<std::string>();
            }
            if (auto d = js.find("depends_on"); d != js.end() && !d->is_null()) {
                if (!d->is_number_unsigned()) throw ValidationError(sw + ": depends_on must be a non-negative index");
                st.depends_on = d->get<std::size_t>();
            }
            s.steps.push_back(std::move(st));
        }
        validate_session(s, corpus);
        out.push_back(std::move(s));
    }
    return out;
}

std::vector<SessionScript> load_sessions(const std::filesystem::path& path, const FaqCorpus& corpus) {
    return parse_sessions(read_file(path), corpus);
}

std::string sessions_to_json(const std::vector<SessionScript>& sessions) {
    json doc = json::array();
    for (const auto& s : sessions) {
        json steps = json::array();
        for (const auto& st : s.steps) {
            json js = {{"text", st.text}, {"kind", std::string(to_string(st.kind))}};
            if (st.target_faq_id) js["target_faq_id"] = *st.target_faq_id;
            if (st.depends_on) js["depends_on"] = *st.depends_on;
            steps.push_back(std::move(js));
        }
        doc.push_back({{"id", s.id}, {"steps", std::move(steps)}});
    }
    return doc.dump(2) + "\n";
}

std::optional<std::string> effective_target(const SessionScript& session, std::size_t index) {
    const QueryStep* st = &session.steps.at(index);
    while (st->kind == StepKind::Followup && st->depends_on) st = &session.steps[*st->depends_on];
    if (st->kind == StepKind::Ood || st->kind == StepKind::Greeting) return std::nullopt;
    return st->target_faq_id;
}

SessionScript shuffle_session(const SessionScript& session, std::uint64_t seed) {
    const std::size_t n = session.steps.size();
    // Each FOLLOWUP joins the block of the step it depends on.
    std::vector<std::size_t> block_of(n);
    std::vector<std::vector<std::size_t>> blocks;
    for (std::size_t i = 0; i < n; ++i) {
        const auto& st = session.steps[i];
        if (st.kind == StepKind::Followup && st.depends_on) {
            std::size_t b = block_of[*st.depends_on];
            auto& members = blocks[b];
            // Insert right after the last member of this dependency's subtree so
            // the first follow-up sits directly behind its dependency.
            auto pos = std::find(members.begin(), members.end(), *st.depends_on);
            ++pos;
            while (pos != members.end() && session.steps[*pos].kind == StepKind::Followup) ++pos;
            members.insert(pos, i);
            block_of[i] = b;
        } else {
            block_of[i] = blocks.size();
            blocks.push_back({i});
        }
    }
    Rng rng(derive_seed(seed, {0x5e55}));
    rng.shuffle(blocks);

    std::vector<std::size_t> order;
    order.reserve(n);
    for (const auto& b : blocks) order.insert(order.end(), b.begin(), b.end());
    std::vector<std::size_t> new_index(n);
    for (std::size_t k = 0; k < n; ++k) new_index[order[k]] = k;

    SessionScript out{session.id, {}};
    out.steps.reserve(n);
    for (std::size_t k = 0; k < n; ++k) {
        QueryStep st = session.steps[order[k]];
        if (st.depends_on) st.depends_on = new_index[*st.depends_on];
        out.steps.push_back(std::move(st));
    }
    return out;
}

namespace {

const std::unordered_set<std::string>& stop_words() {
    static const std::unordered_set<std::string> words = {
        "a", "an", "the", "is", "are", "am", "i", "my", "me", "to", "for", "of", "on", "in", "it", "do", "does",
        "can", "there", "be", "will", "what", "how", "why", "when", "who", "which", "while", "any", "this", "that",
        "with", "and", "or", "you", "your", "get", "into", "from", "much", "shows", "some", "please"};
    return words;
}

// Words that may be dropped without changing the intent.
const std::unordered_set<std::string>& droppable() {
    static const std::unordered_set<std::string> words = {"a", "an", "the", "is", "are", "there", "my", "for", "of", "to", "do", "does"};
    return words;
}

const std::unordered_map<std::string, std::vector<std::string>>& synonyms() {
    static const std::unordered_map<std::string, std::vector<std::string>> lex = {
        {"annual", {"yearly", "per year", "every year"}},
        {"fee", {"charge", "charges", "cost"}},
        {"card", {"cc", "plastic"}},
        {"credit", {"cc"}},
        {"benefits", {"perks", "advantages", "rewards", "offers"}},
        {"getting", {"receiving", "seeing"}},
        {"otp", {"one time password", "verification code", "login code"}},
        {"eligible", {"qualified", "allowed"}},
        {"apply", {"sign up", "register", "enroll"}},
        {"increase", {"raise", "enhance", "extend", "bump up"}},
        {"limit", {"spending cap", "cap"}},
        {"convert", {"change", "turn", "split"}},
        {"purchase", {"transaction", "spend", "payment"}},
        {"emi", {"instalments", "monthly payments", "easy payments"}},
        {"check", {"track", "know", "see"}},
        {"status", {"progress", "stage", "update"}},
        {"application", {"request", "form"}},
        {"server", {"system", "backend"}},
        {"error", {"issue", "failure", "problem"}},
        {"page", {"screen", "website", "app"}},
        {"applying", {"filling the form", "signing up"}},
        {"receive", {"get", "be delivered"}},
        {"physical", {"actual", "real"}},
        {"who", {"which people", "which customers"}},
        {"how", {"what is the way to", "how exactly"}},
        {"when", {"by when", "how soon"}},
        {"why", {"what is the reason"}},
        {"not", {"never"}},
        {"do", {"can", "should"}},
        {"can", {"could", "do"}},
        {"block", {"freeze", "stop", "disable"}},
        {"lost", {"missing", "stolen"}},
    };
    return lex;
}

const std::unordered_map<std::string, std::string>& hinglish_lexicon() {
    static const std::unordered_map<std::string, std::string> lex = {
        {"what", "kya"}, {"is", "hai"}, {"how", "kaise"}, {"my", "mera"}, {"when", "kab"}, {"why", "kyun"},
        {"not", "nahi"}, {"get", "milega"}, {"can", "sakte"}, {"there", "koi"}, {"will", "hoga"}, {"who", "kaun"},
    };
    return lex;
}

const std::vector<std::string>& prefixes() {
    static const std::vector<std::string> p = {"",           "",           "tell me",         "i want to know",
                                               "please explain", "can you tell me", "quick question", "hey",
                                               "need help"};
    return p;
}

const std::vector<std::string>& suffixes() {
    static const std::vector<std::string> s = {"", "", "", "please", "thanks", "asap"};
    return s;
}

std::string make_paraphrase(const std::vector<std::string>& src, Rng& rng, const SynthOptions& opt) {
    const auto& stops = stop_words();
    std::vector<std::size_t> content_idx;
    for (std::size_t i = 0; i < src.size(); ++i)
        if (!stops.count(src[i])) content_idx.push_back(i);
    // One content word survives verbatim so intent stays recognizable.
    const std::size_t keep = content_idx.empty() ? src.size() : content_idx[rng.below(content_idx.size())];

    std::vector<std::string> out;
    for (std::size_t i = 0; i < src.size(); ++i) {
        const auto& w = src[i];
        if (i == keep) {
            out.push_back(w);
            continue;
        }
        if (droppable().count(w) && rng.bernoulli(0.35)) continue;
        auto syn = synonyms().find(w);
        if (syn != synonyms().end() && rng.bernoulli(0.7)) {
            out.push_back(rng.pick(syn->second));
            continue;
        }
        if (opt.hinglish) {
            auto h = hinglish_lexicon().find(w);
            if (h != hinglish_lexicon().end() && rng.bernoulli(0.6)) {
                out.push_back(h->second);
                continue;
            }
        }
        out.push_back(w);
    }
    // Occasionally move the leading interrogative to the end.
    if (out.size() > 3 && rng.bernoulli(0.2)) std::rotate(out.begin(), out.begin() + 1, out.end());

    std::string body = text::join(out, " ");
    const auto& pre = rng.pick(prefixes());
    const auto& suf = rng.pick(suffixes());
    std::string res = pre.empty() ? body : pre + " " + body;
    if (!suf.empty()) res += " " + suf;
    return res;
}

}  // namespace

std::vector<std::string> content_words(std::string_view s) {
    std::vector<std::string> out;
    for (auto& w : text::words(s))
        if (!stop_words().count(w)) out.push_back(std::move(w));
    return out;
}

std::vector<ParaphrasePair> synth_paraphrases(const FaqCorpus& corpus, std::size_t per_faq, std::uint64_t seed,
                                              const SynthOptions& options) {
    if (per_faq == 0) throw ValidationError("synth_paraphrases: per_faq must be at least 1");
    std::vector<ParaphrasePair> out;
    out.reserve(corpus.size() * per_faq * 2);
    for (std::size_t f = 0; f < corpus.size(); ++f) {
        const auto& faq = corpus.entries()[f];
        const auto src = text::words(faq.question);
        const std::string src_norm = text::join(src, " ");
        for (PairKind kind : {PairKind::QueryQuestion, PairKind::QueryQna}) {
            Rng rng(derive_seed(seed, {f, static_cast<std::uint64_t>(kind)}));
            for (std::size_t n = 0; n < per_faq; ++n) {
                std::string q;
                // A handful of retries is always enough in practice; the final
                // fallback forces a framing prefix so the text differs.
                for (int attempt = 0; attempt < 16; ++attempt) {
                    q = make_paraphrase(src, rng, options);
                    if (q != src_norm) break;
                }
                if (q == src_norm) q = "tell me " + q;
                out.push_back({std::move(q), faq.id, kind});
            }
        }
    }
    return out;
}

}  // namespace ragopt
