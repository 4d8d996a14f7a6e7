#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "ragopt/error.hpp"
#include "ragopt/harness.hpp"

using namespace ragopt;

namespace {

struct Overrides {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> mode;
    std::optional<double> threshold;
    std::optional<std::string> out;
    std::optional<std::string> corpus, train_sessions, test_sessions, ood, embeddings, head, policy;
    std::optional<std::string> loss;
    std::optional<double> lr;
    std::optional<std::size_t> epochs;
    std::optional<std::size_t> samples, rounds;
    bool hinglish = false;
};

RunConfig resolve(const Overrides& o) {
    RunConfig c = o.config.empty() ? RunConfig{} : load_run_config(o.config);
    // Overlay through the same parser the config file uses, so validation stays in one place.
    std::string patch = "{";
    auto add = [&](const char* key, const std::string& json_value) {
        if (patch.size() > 1) patch += ",";
        patch += std::string("\"") + key + "\":" + json_value;
    };
    auto quote = [](const std::string& s) {
        std::string q = "\"";
        for (char ch : s) {
            if (ch == '"' || ch == '\\') q += '\\';
            q += ch;
        }
        return q + "\"";
    };
    if (o.seed) add("seed", std::to_string(*o.seed));
    if (o.mode) add("mode", quote(*o.mode));
    if (o.out) add("out_dir", quote(*o.out));
    if (o.corpus) add("corpus", quote(*o.corpus));
    if (o.train_sessions) add("train_sessions", quote(*o.train_sessions));
    if (o.test_sessions) add("test_sessions", quote(*o.test_sessions));
    if (o.ood) add("ood_queries", quote(*o.ood));
    if (o.embeddings) add("embeddings", quote(*o.embeddings));
    if (o.head) add("head", quote(*o.head));
    if (o.policy) add("policy", quote(*o.policy));
    if (o.loss) add("loss", quote(*o.loss));
    if (o.epochs) add("embed_epochs", std::to_string(*o.epochs));
    if (o.samples) add("policy_samples", std::to_string(*o.samples));
    if (o.rounds) add("policy_rounds", std::to_string(*o.rounds));
    if (o.hinglish) add("hinglish", "true");
    c = parse_run_config(patch + "}", c);
    if (o.threshold) c.threshold = *o.threshold;
    if (o.lr) c.embed_lr = *o.lr;
    c.validate();
    return c;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"ragopt: retrieval gating for a FAQ chatbot"};
    app.require_subcommand(1);
    Overrides o;

    app.add_option("--config", o.config, "JSON run config")->check(CLI::ExistingFile);
    app.add_option("--seed", o.seed, "Master seed");
    app.add_option("--mode", o.mode, "ALL_FETCH | SIMTHR | SIMTHR_POLICY | POLICY_ONLY");
    app.add_option("--threshold", o.threshold, "Similarity threshold for static answers");
    app.add_option("--out", o.out, "Output directory");
    app.add_option("--corpus", o.corpus, "FAQ corpus JSON");
    app.add_option("--train-sessions", o.train_sessions, "Training sessions JSON");
    app.add_option("--test-sessions", o.test_sessions, "Test sessions JSON");
    app.add_option("--ood", o.ood, "OOD query list JSON");
    app.add_option("--embeddings", o.embeddings, "Base embedding fixture JSON");
    app.add_option("--head", o.head, "Projection head path");
    app.add_option("--policy", o.policy, "Policy path");

    auto* embed_train = app.add_subcommand("embed-train", "Fine-tune the projection head");
    embed_train->add_option("--loss", o.loss, "infonce | triplet");
    embed_train->add_option("--lr", o.lr, "Learning rate");
    embed_train->add_option("--epochs", o.epochs, "Epochs");
    embed_train->add_flag("--hinglish", o.hinglish, "Mix Hinglish paraphrases into the synthetic data");
    auto* embed_eval = app.add_subcommand("embed-eval", "Evaluate the saved head against the identity projection");
    embed_eval->add_flag("--hinglish", o.hinglish, "Mix Hinglish paraphrases into the synthetic data");
    auto* policy_train = app.add_subcommand("policy-train", "Generate rollouts and train the gating policy");
    policy_train->add_option("--samples", o.samples, "Rollout samples per session per round");
    policy_train->add_option("--rounds", o.rounds, "On-policy rounds");
    auto* simulate = app.add_subcommand("simulate", "Run the test sessions under --mode");
    auto* report = app.add_subcommand("report", "Compare ALL_FETCH, SIMTHR and SIMTHR_POLICY");
    auto* repl = app.add_subcommand("repl", "Interactive chat against the simulated pipeline");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        const RunConfig config = resolve(o);
        if (embed_train->parsed()) cmd_embed_train(config, std::cout);
        else if (embed_eval->parsed()) cmd_embed_eval(config, std::cout);
        else if (policy_train->parsed()) cmd_policy_train(config, std::cout);
        else if (simulate->parsed()) cmd_simulate(config, std::cout);
        else if (report->parsed()) cmd_report(config, std::cout);
        else if (repl->parsed()) cmd_repl(config, std::cin, std::cout);
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
