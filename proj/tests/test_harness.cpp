#include <catch2/catch_amalgamated.hpp>

#include <sstream>

#include "json.hpp"
#include "ragopt/error.hpp"
#include "ragopt/harness.hpp"
#include "ragopt/io.hpp"
#include "support.hpp"

using namespace ragopt;

namespace {

RunConfig small_config(const std::string& name) {
    RunConfig c;
    const auto d = testutil::data_dir();
    c.corpus = d / "faq_corpus.json";
    c.train_sessions = d / "train_sessions.json";
    c.test_sessions = d / "test_session.json";
    c.ood_queries = d / "ood_queries.json";
    c.out_dir = testutil::scratch_dir(name);
    c.embed_epochs = 4;
    c.train_per_faq = 8;
    c.heldout_per_faq = 4;
    c.policy_rounds = 1;
    c.policy_samples = 1;
    c.policy_epochs = 3;
    return c;
}

}  // namespace

TEST_CASE("config defaults carry the published values") {
    const RunConfig c;
    CHECK(c.tau == 0.1);
    CHECK(c.batch_size == 8);
    CHECK(c.gamma == 0.1);
    CHECK(c.lambda == 0.1);
    CHECK(c.threshold == 0.92);
    CHECK(c.k == 3);
    CHECK(c.mc_passes == 10);
    CHECK(c.rewards.fetch_reward == 0.1);
    CHECK(c.rewards.no_fetch_good == 2.0);
    CHECK(c.rewards.no_fetch_bad == -1.0);
    CHECK(c.mode == GateMode::SimThrPolicy);
    CHECK_NOTHROW(c.validate());
}

TEST_CASE("config file overlay and round trip") {
    auto c = parse_run_config(R"({"seed": 3, "mode": "SIMTHR", "threshold": 0.8, "rewards": {"no_fetch_good": 1.0}, "loss": "triplet"})");
    CHECK(c.seed == 3);
    CHECK(c.mode == GateMode::SimThr);
    CHECK(c.threshold == 0.8);
    CHECK(c.rewards.no_fetch_good == 1.0);
    CHECK(c.loss == HeadLoss::Triplet);
    CHECK(c.tau == 0.1);
    const auto text = run_config_to_json(c);
    CHECK(run_config_to_json(parse_run_config(text)) == text);

    CHECK_THROWS_AS(parse_run_config("{oops"), ParseError);
    CHECK_THROWS_AS(parse_run_config(R"({"seed": "seven"})"), ParseError);
    CHECK_THROWS_AS(parse_run_config(R"({"mode": "SOMETIMES"})"), ValidationError);
    CHECK_THROWS_AS(parse_run_config(R"({"gamma": 2.0})").validate(), ValidationError);
    CHECK_THROWS_AS(parse_run_config(R"({"threshold": 0})").validate(), ValidationError);
    CHECK_THROWS_AS(parse_run_config(R"({"rewards": {"fetch_reward": 5}})").validate(), ValidationError);
}

TEST_CASE("paths are checked before running") {
    auto c = small_config("paths");
    c.corpus = c.out_dir / "missing.json";
    std::ostringstream out;
    CHECK_THROWS_AS(cmd_embed_train(c, out), ValidationError);
    c = small_config("paths2");
    CHECK_THROWS_AS(cmd_report(c, out), ValidationError);  // no head yet
}

TEST_CASE("embed commands") {
    std::ostringstream out;
    SECTION("zero learning rate leaves metrics unchanged") {
        auto c = small_config("embed_lr0");
        c.embed_lr = 0.0;
        const auto r = cmd_embed_train(c, out);
        CHECK(r.before.top1 == r.after.top1);
        CHECK(r.before.top3 == r.after.top3);
        CHECK(r.ood_before.gap() == r.ood_after.gap());
    }
    SECTION("triplet is labeled") {
        auto c = small_config("embed_triplet");
        c.loss = HeadLoss::Triplet;
        const auto r = cmd_embed_train(c, out);
        CHECK(r.loss_name == "triplet");
        CHECK(out.str().find("triplet") != std::string::npos);
        const auto doc = nlohmann::json::parse(read_file(c.out_dir / "embed_report.json"));
        CHECK(doc["loss"] == "triplet");
        CHECK(std::filesystem::exists(c.head_path()));
    }
    SECTION("training improves top-1 and eval reads the head back") {
        auto c = small_config("embed_default");
        c.embed_epochs = 20;
        const auto r = cmd_embed_train(c, out);
        CHECK(r.after.top1 > r.before.top1);
        const auto e = cmd_embed_eval(c, out);
        CHECK(e.after.top1 == r.after.top1);
    }
}

TEST_CASE("policy training and reports") {
    std::ostringstream out;
    auto c = small_config("policy");
    cmd_embed_train(c, out);

    SECTION("no sessions") {
        write_file_atomic(c.out_dir / "none.json", "[]");
        c.train_sessions = c.out_dir / "none.json";
        CHECK_THROWS_AS(cmd_policy_train(c, out), InsufficientData);
    }
    SECTION("artifacts, counts and report rows") {
        const auto rep = cmd_policy_train(c, out);
        CHECK(rep.tuples == 168);
        CHECK(std::filesystem::exists(c.policy_path()));
        CHECK(std::filesystem::exists(c.out_dir / "rollouts.jsonl"));
        CHECK(std::filesystem::exists(c.out_dir / "policy_trace.json"));

        const auto report = cmd_report(c, out);
        REQUIRE(report.settings.size() == 3);
        CHECK(report.settings[0].setting == "ALL_FETCH");
        CHECK(report.settings[0].saving == 0.0);
        CHECK(report.settings[1].tokens <= report.settings[0].tokens);
        const auto table = read_file(c.out_dir / "report.txt");
        CHECK(table.find("ALL_FETCH       ") != std::string::npos);
        const auto doc = nlohmann::json::parse(read_file(c.out_dir / "report.json"));
        CHECK(doc["settings"].size() == 3);
        CHECK(doc["settings"][2]["setting"] == "SIMTHR_POLICY");
        for (auto mode : {"all_fetch", "simthr", "simthr_policy"}) CHECK(std::filesystem::exists(c.out_dir / (std::string("ledger_") + mode + ".csv")));
    }
    SECTION("repl") {
        cmd_policy_train(c, out);
        SECTION("exit ends the loop") {
            std::istringstream in("exit\nhi\n");
            std::ostringstream o;
            cmd_repl(c, in, o);
            CHECK(o.str().find("bot:") == std::string::npos);
            CHECK(o.str().find("bye") != std::string::npos);
        }
        SECTION("free text runs without a rating") {
            std::istringstream in("\nwhat is the capital of peru\n");
            std::ostringstream o;
            cmd_repl(c, in, o);
            CHECK(o.str().find("route: ") != std::string::npos);
            CHECK(o.str().find("rating:") == std::string::npos);
            CHECK(o.str().find("empty query") != std::string::npos);
        }
        SECTION("scripted query takes the same route as the report trace") {
            const auto sim = cmd_simulate(c, out);
            const auto& first = sim.trace.front();
            std::istringstream in(first.query + "\n");
            std::ostringstream o;
            cmd_repl(c, in, o);
            CHECK(o.str().find("route: " + std::string(to_string(first.route))) != std::string::npos);
            CHECK(o.str().find("rating: ") != std::string::npos);
        }
    }
}
