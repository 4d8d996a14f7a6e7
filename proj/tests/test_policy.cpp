#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "ragopt/error.hpp"
#include "ragopt/policy.hpp"
#include "support.hpp"

using namespace ragopt;
using Catch::Matchers::WithinAbs;

namespace {

PolicyNet zero_net(double dropout = 0.0) {
    PolicyNet n;
    n.dropout_rate = dropout;
    return n;
}

PolicyNet random_net(Rng& rng, double scale, double dropout) {
    PolicyNet n = zero_net(dropout);
    for (std::size_t i = 0; i < n.parameter_count(); ++i) n.param(i) = rng.uniform(-scale, scale);
    return n;
}

Features random_features(Rng& rng) {
    Features f;
    for (auto& x : f) x = rng.uniform(-1.0, 1.0);
    return f;
}

double entropy(const ActionProbs& p) { return -(p.fetch * std::log(p.fetch) + p.no_fetch * std::log(p.no_fetch)); }

}  // namespace

TEST_CASE("state serialization") {
    PolicyState s;
    s.prev = {{"is there annual fee", Action::Fetch}};
    s.current_query = "can you reduce it";
    CHECK(serialize_state(s) == "[CLS] is there annual fee [SEP] [FETCH] can you reduce it [SEP]");
    PolicyState first;
    first.current_query = "hi";
    CHECK(serialize_state(first) == "[CLS] hi [SEP]");

    for (const std::string x : {"[CLS] a b [SEP]", "[CLS] q1 [SEP] [NO_FETCH] q2 [SEP]", "[CLS] q1 [SEP] [FETCH] q2 [SEP] [NO_FETCH] q3 [SEP]",
                                "[CLS] what cashback on swiggy? [SEP] [FETCH] what about pvr [SEP] [FETCH] how much on curefit [SEP]"}) {
        CHECK(serialize_state(parse_state(x)) == x);
    }
    const auto p = parse_state("[CLS] q1 [SEP] [FETCH] q2 [SEP] [NO_FETCH] q3 [SEP]");
    REQUIRE(p.prev.size() == 2);
    CHECK(p.prev[0] == PrevTurn{"q1", Action::Fetch});
    CHECK(p.prev[1] == PrevTurn{"q2", Action::NoFetch});
    CHECK(p.current_query == "q3");

    CHECK_THROWS_AS(parse_state("q1 [SEP]"), ParseError);
    CHECK_THROWS_AS(parse_state("[CLS] q1 [SEP] q2 [SEP]"), ParseError);
    CHECK_THROWS_AS(parse_state("[CLS] [SEP]"), ParseError);
    PolicyState reserved;
    reserved.current_query = "sneaky [SEP] text";
    CHECK_THROWS_AS(serialize_state(reserved), ValidationError);
}

TEST_CASE("featurize") {
    auto corpus = load_corpus(testutil::data_dir() / "faq_corpus.json");
    EmbeddingStore store;
    const auto head = ProjectionHead::identity(store.dimension());
    Retriever r(store, head, corpus);

    SECTION("first query") {
        const auto s = featurize({}, "is there an annual fee", r, {});
        CHECK(s.features[0] == r.top1("is there an annual fee").score);
        for (int i : {1, 2, 3, 4, 7}) CHECK(s.features[i] == 0.0);
        CHECK(s.features[5] == -1.0);
        CHECK(s.features[6] == -1.0);
    }
    SECTION("repeat of the previous query") {
        const std::vector<PrevTurn> prev{{"what about pvr", Action::NoFetch}, {"annual fee", Action::Fetch}};
        const auto s = featurize(prev, "annual fee", r, {});
        CHECK_THAT(s.features[3], WithinAbs(1.0, 1e-9));
        CHECK(s.features[5] == 1.0);
        CHECK(s.features[6] == 0.0);
        CHECK(s.features[1] == r.top1("annual fee").score);
        CHECK(s.features[2] == r.top1("what about pvr").score);
    }
    SECTION("history FAQ similarity is a max over the held ids") {
        const std::vector<std::string> ids{"card_benefits", "annual_fee", "otp_issue"};
        const std::string q = "what about pvr";
        const auto s = featurize({}, q, r, ids);
        double best = -1.0;
        for (const auto& id : ids) best = std::max(best, project_sim(head, store.embed(q), store.embed(corpus.at(id).qna_text())));
        CHECK_THAT(s.features[7], WithinAbs(best, 1e-12));
    }
}

TEST_CASE("forward") {
    Rng rng(8);
    SECTION("zero net is uniform") {
        const auto p = forward(zero_net(), Features{});
        CHECK(p.fetch == 0.5);
        CHECK(p.no_fetch == 0.5);
        CHECK(greedy_action(p) == Action::Fetch);
    }
    SECTION("two-unit miniature against a hand evaluation") {
        PolicyNet n = zero_net();
        // hidden 0 reads x0 and x5, hidden 1 reads x7
        n.w1[0 * kFeatureDim + 0] = 0.7;
        n.w1[0 * kFeatureDim + 5] = -0.4;
        n.b1[0] = 0.1;
        n.w1[1 * kFeatureDim + 7] = 1.3;
        n.b1[1] = -0.2;
        n.w2[0 * kHiddenDim + 0] = 0.5;
        n.w2[0 * kHiddenDim + 1] = -1.1;
        n.w2[1 * kHiddenDim + 0] = -0.6;
        n.w2[1 * kHiddenDim + 1] = 0.9;
        n.b2 = {0.05, -0.05};
        Features x{};
        x[0] = 0.8;
        x[5] = 1.0;
        x[7] = 0.3;
        const double h0 = std::tanh(0.7 * 0.8 - 0.4 * 1.0 + 0.1);
        const double h1 = std::tanh(1.3 * 0.3 - 0.2);
        const double z0 = 0.5 * h0 - 1.1 * h1 + 0.05;
        const double z1 = -0.6 * h0 + 0.9 * h1 - 0.05;
        const double pf = std::exp(z0) / (std::exp(z0) + std::exp(z1));
        const auto p = forward(n, x);
        CHECK_THAT(p.fetch, WithinAbs(pf, 1e-9));
        CHECK_THAT(p.no_fetch, WithinAbs(1.0 - pf, 1e-9));
    }
    SECTION("random nets give positive distributions") {
        for (int t = 0; t < 200; ++t) {
            const auto n = random_net(rng, 3.0, 0.3);
            const auto x = random_features(rng);
            for (auto seed : {std::optional<std::uint64_t>{}, std::optional<std::uint64_t>{rng.next_u64()}}) {
                const auto p = forward(n, x, seed);
                CHECK(p.fetch > 0.0);
                CHECK(p.no_fetch > 0.0);
                CHECK_THAT(p.fetch + p.no_fetch, WithinAbs(1.0, 1e-9));
            }
        }
    }
    SECTION("seeded dropout is reproducible and actually drops") {
        const auto n = random_net(rng, 1.0, 0.5);
        const auto x = random_features(rng);
        CHECK(forward(n, x, 5).fetch == forward(n, x, 5).fetch);
        bool differs = false;
        for (std::uint64_t s = 0; s < 20; ++s) differs = differs || forward(n, x, s).fetch != forward(n, x).fetch;
        CHECK(differs);
        const auto mask = dropout_mask(0.5, 3);
        for (double m : mask) CHECK((m == 0.0 || m == 2.0));
        for (double m : dropout_mask(0.0, 3)) CHECK(m == 1.0);
    }
}

TEST_CASE("mc_predict") {
    Rng rng(9);
    PolicyState s;
    s.features = random_features(rng);
    SECTION("no dropout equals the plain forward") {
        const auto n = random_net(rng, 1.0, 0.0);
        const auto a = mc_predict(n, s, 10, 1), b = forward(n, s);
        CHECK(a.fetch == b.fetch);
        CHECK(a.no_fetch == b.no_fetch);
    }
    SECTION("mean of the per-pass seeded forwards") {
        const auto n = random_net(rng, 1.0, 0.3);
        CHECK(mc_predict(n, s, 1, 77).fetch == forward(n, s, mc_pass_seed(77, 0)).fetch);
        double sum = 0.0;
        for (std::size_t i = 0; i < 10; ++i) sum += forward(n, s, mc_pass_seed(77, i)).fetch;
        CHECK_THAT(mc_predict(n, s, 10, 77).fetch, WithinAbs(sum / 10.0, 1e-12));
        CHECK_THROWS_AS(mc_predict(n, s, 0, 77), ValidationError);
    }
}

TEST_CASE("sample_action") {
    PolicyState s;
    SECTION("saturated net") {
        PolicyNet n = zero_net();
        n.b2 = {40.0, -40.0};
        for (std::uint64_t seed = 0; seed < 200; ++seed) {
            const auto a = sample_action(n, s, seed);
            CHECK(a.action == Action::Fetch);
            CHECK_THAT(a.log_prob, WithinAbs(0.0, 1e-12));
        }
    }
    SECTION("symmetric net is a fair coin") {
        const PolicyNet n = zero_net(0.1);
        int fetch = 0;
        for (std::uint64_t seed = 0; seed < 10000; ++seed) fetch += sample_action(n, s, seed).action == Action::Fetch;
        CHECK(fetch >= 4800);
        CHECK(fetch <= 5200);
    }
    SECTION("deterministic per seed and log prob matches the seeded pass") {
        Rng rng(1);
        const auto n = random_net(rng, 1.0, 0.2);
        s.features = random_features(rng);
        const auto a = sample_action(n, s, 31), b = sample_action(n, s, 31);
        CHECK(a.action == b.action);
        CHECK(a.log_prob == b.log_prob);
        CHECK(a.log_prob <= 0.0);
        CHECK_THAT(a.log_prob, WithinAbs(std::log(forward(n, s, a.dropout_seed).of(a.action)), 1e-12));
    }
}

TEST_CASE("discounted returns") {
    const std::vector<double> r{0.1, 2.0};
    const auto g = discounted_returns(r, 0.1);
    CHECK_THAT(g[0], WithinAbs(0.3, 1e-12));
    CHECK_THAT(g[1], WithinAbs(2.0, 1e-12));
    const std::vector<double> r3{0.5, -1.0, 2.0};
    CHECK(discounted_returns(r3, 0.0) == r3);
    const std::vector<double> ones(4, 1.0);
    CHECK(discounted_returns(ones, 1.0) == std::vector<double>{4, 3, 2, 1});
    CHECK(discounted_returns({}, 0.1).empty());
    CHECK_THROWS_AS(discounted_returns(r, 1.5), ValidationError);
    CHECK_THROWS_AS(discounted_returns(r, -0.1), ValidationError);

    Rng rng(12);
    for (int t = 0; t < 1000; ++t) {
        std::vector<double> rw(1 + rng.below(40));
        for (auto& x : rw) x = rng.uniform(-2.0, 2.0);
        const double gamma = rng.uniform();
        const auto gs = discounted_returns(rw, gamma);
        for (std::size_t i = 0; i + 1 < rw.size(); ++i) REQUIRE(std::abs(gs[i] - (rw[i] + gamma * gs[i + 1])) <= 1e-12);
        REQUIRE(gs.back() == rw.back());
    }
}

TEST_CASE("pg_loss") {
    SECTION("single uniform step") {
        const PolicyNet n = zero_net();
        const Features x{};
        const std::vector<PgSample> batch{{&x, Action::NoFetch, 2.0, std::nullopt}};
        CHECK_THAT(pg_loss(n, batch, 0.1).loss, WithinAbs(1.9 * std::log(2.0), 1e-12));
    }
    SECTION("null objective") {
        Rng rng(6);
        const auto n = random_net(rng, 1.0, 0.1);
        const auto x = random_features(rng);
        const std::vector<PgSample> batch{{&x, Action::Fetch, 0.0, 1}, {&x, Action::NoFetch, 0.0, 2}};
        const auto r = pg_loss(n, batch, 0.0);
        CHECK(r.loss == 0.0);
        for (double g : r.grad) CHECK(g == 0.0);
    }
    SECTION("empty batch") { CHECK_THROWS_AS(pg_loss(zero_net(), {}, 0.1), EmptyBatch); }
    SECTION("gradient vs finite differences") {
        Rng rng(13);
        for (int t = 0; t < 20; ++t) {
            auto n = random_net(rng, 0.8, 0.25);
            std::vector<Features> xs(3);
            std::vector<PgSample> batch;
            for (std::size_t i = 0; i < xs.size(); ++i) {
                xs[i] = random_features(rng);
                const std::optional<std::uint64_t> seed = rng.bernoulli(0.5) ? std::optional<std::uint64_t>(rng.next_u64()) : std::nullopt;
                batch.push_back({&xs[i], rng.bernoulli(0.5) ? Action::Fetch : Action::NoFetch, rng.uniform(-1.0, 2.5), seed});
            }
            const auto r = pg_loss(n, batch, 0.1);
            REQUIRE(r.grad.size() == n.parameter_count());
            double worst = 0.0;
            const double h = 1e-5;
            for (std::size_t i = 0; i < n.parameter_count(); ++i) {
                const double keep = n.param(i);
                n.param(i) = keep + h;
                const double up = pg_loss(n, batch, 0.1).loss;
                n.param(i) = keep - h;
                const double down = pg_loss(n, batch, 0.1).loss;
                n.param(i) = keep;
                worst = std::max(worst, testutil::rel_err(r.grad[i], (up - down) / (2 * h)));
            }
            CHECK(worst < 1e-4);
        }
    }
    SECTION("entropy term alone pulls a saturated policy toward uniform") {
        PolicyNet n = zero_net();
        n.b2 = {4.0, -4.0};
        n.w2[0] = 1.0;
        n.b1[0] = 0.5;
        const Features x{};
        const std::vector<PgSample> batch{{&x, Action::Fetch, 0.0, std::nullopt}};
        const double before = entropy(forward(n, x));
        const auto r = pg_loss(n, batch, 0.1);
        for (std::size_t i = 0; i < n.parameter_count(); ++i) n.param(i) -= 0.5 * r.grad[i];
        CHECK(entropy(forward(n, x)) > before);
    }
}

TEST_CASE("train_policy") {
    // identical states, NO_FETCH pays 2 and FETCH 0.1; one-step episodes so G equals the reward
    std::vector<Trajectory> data;
    Rng rng(3);
    const Features x = random_features(rng);
    for (std::size_t i = 0; i < 40; ++i) {
        const Action a = i % 2 ? Action::NoFetch : Action::Fetch;
        PolicyState s;
        s.current_query = "q";
        s.features = x;
        data.push_back({"t" + std::to_string(i), {{s, a, a == Action::NoFetch ? 2.0 : 0.1, std::log(0.5), rng.next_u64(), 0}}, {}});
    }
    const auto init = PolicyNet::init(7);

    SECTION("zero learning rate") {
        PolicyTrainConfig c;
        c.learning_rate = 0.0;
        CHECK(train_policy(init, data, c).net == init);
    }
    SECTION("converges toward the better action, deterministically") {
        PolicyTrainConfig c;
        c.epochs = 200;
        const auto a = train_policy(init, data, c);
        const auto b = train_policy(init, data, c);
        CHECK(a.net == b.net);
        CHECK(a.loss_trace == b.loss_trace);
        CHECK(forward(a.net, x).no_fetch > 0.9);
    }
    SECTION("no trajectories") { CHECK_THROWS_AS(train_policy(init, {}, {}), InsufficientData); }
}

TEST_CASE("policy json") {
    Rng rng(21);
    const auto n = random_net(rng, 1.0, 0.15);
    const auto back = policy_from_json(policy_to_json(n));
    CHECK(back == n);
    CHECK_THROWS_AS(policy_from_json(R"({"format_version":99})"), Error);
    CHECK_THROWS_AS(policy_from_json("nope"), ParseError);
    const auto init = PolicyNet::init(5);
    for (std::size_t i = 0; i < init.parameter_count(); ++i) {
        CHECK(init.param(i) >= -0.1);
        CHECK(init.param(i) <= 0.1);
    }
    CHECK(PolicyNet::init(5) == init);
}
