#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ragopt/embedding.hpp"
#include "ragopt/error.hpp"
#include "support.hpp"

using namespace ragopt;
using Catch::Matchers::WithinAbs;

namespace {

Vector matvec(const Matrix& w, const Vector& x) {
    Vector y(w.rows(), 0.0);
    for (std::size_t r = 0; r < w.rows(); ++r)
        for (std::size_t c = 0; c < w.cols(); ++c) y[r] += w(r, c) * x[c];
    return y;
}

double plain_cos(const Vector& a, const Vector& b) {
    double ab = 0, aa = 0, bb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    return ab / std::sqrt(aa * bb);
}

// Scalar re-derivation of the contrastive loss: views 2p and 2p+1 are partners.
double infonce_oracle(const Matrix& w, const std::vector<PositivePair>& batch, double tau) {
    std::vector<Vector> views;
    for (const auto& p : batch) {
        views.push_back(matvec(w, p.anchor));
        views.push_back(matvec(w, p.positive));
    }
    const std::size_t n = views.size();
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t j = i % 2 == 0 ? i + 1 : i - 1;
        double denom = 0.0;
        for (std::size_t k = 0; k < n; ++k)
            if (k != i) denom += std::exp(plain_cos(views[i], views[k]) / tau);
        total += -std::log(std::exp(plain_cos(views[i], views[j]) / tau) / denom);
    }
    return total / static_cast<double>(n);
}

template <typename LossFn>
double max_fd_error(Matrix w, const Matrix& grad, LossFn loss) {
    const double h = 1e-5;
    double worst = 0.0;
    for (std::size_t i = 0; i < w.data().size(); ++i) {
        const double keep = w.data()[i];
        w.data()[i] = keep + h;
        const double up = loss(w);
        w.data()[i] = keep - h;
        const double down = loss(w);
        w.data()[i] = keep;
        worst = std::max(worst, testutil::rel_err(grad.data()[i], (up - down) / (2 * h)));
    }
    return worst;
}

}  // namespace

TEST_CASE("fallback embedder") {
    EmbeddingStore store;
    const auto a = store.embed("annual fee");
    CHECK(a == store.embed("annual fee"));
    CHECK(a.size() == 256);
    CHECK_THAT(norm(a), WithinAbs(1.0, 1e-9));
    CHECK(cosine(a, store.embed("annual fees")) > cosine(a, store.embed("weather today")));
    CHECK_THAT(norm(store.embed("")), WithinAbs(1.0, 1e-9));
}

TEST_CASE("fixture vectors take precedence") {
    auto store = EmbeddingStore::parse(R"({"dimension":3,"vectors":{"hello":[1,0,0]}})");
    CHECK(store.embed("hello") == Vector{1, 0, 0});
    CHECK(store.embed("other").size() == 3);
    CHECK_THROWS_AS(EmbeddingStore::parse(R"({"dimension":3,"vectors":{"x":[1,0]}})"), Error);
}

TEST_CASE("cosine") {
    const Vector v{0.3, -1.2, 2.0};
    const Vector neg{-0.3, 1.2, -2.0};
    CHECK_THAT(cosine(v, v), WithinAbs(1.0, 1e-12));
    CHECK_THAT(cosine(v, neg), WithinAbs(-1.0, 1e-12));
    CHECK_THAT(cosine(Vector{1, 0}, Vector{0, 1}), WithinAbs(0.0, 1e-15));
    CHECK(cosine(v, Vector{1, 2, 3}) == cosine(Vector{1, 2, 3}, v));
    CHECK_THROWS_AS(cosine(v, Vector{1, 2}), DimensionMismatch);
    CHECK_THROWS_AS(cosine(v, Vector{0, 0, 0}), ZeroVector);
}

TEST_CASE("project_sim") {
    ragopt::Rng rng(11);
    for (int t = 0; t < 20; ++t) {
        const auto a = testutil::random_vector(rng, 6), b = testutil::random_vector(rng, 6);
        auto head = ProjectionHead::identity(6);
        CHECK_THAT(project_sim(head, a, b), WithinAbs(plain_cos(a, b), 1e-12));
        head.weights = testutil::random_matrix(rng, 6, 1.0);
        const double s = project_sim(head, a, b);
        CHECK_THAT(s, WithinAbs(plain_cos(matvec(head.weights, a), matvec(head.weights, b)), 1e-9));
        auto scaled = head;
        for (auto& x : scaled.weights.data()) x *= 3.0;
        CHECK_THAT(project_sim(scaled, a, b), WithinAbs(s, 1e-9));
    }
}

TEST_CASE("head json round trip and validation") {
    ragopt::Rng rng(2);
    ProjectionHead head{testutil::random_matrix(rng, 4), 0.1, 8};
    const auto back = head_from_json(head_to_json(head));
    CHECK(back.weights == head.weights);
    CHECK(back.tau == head.tau);
    ProjectionHead bad = head;
    bad.tau = 0.0;
    CHECK_THROWS_AS(bad.validate(), ValidationError);
    bad = head;
    bad.weights(0, 0) = std::nan("");
    CHECK_THROWS_AS(bad.validate(), ValidationError);
}

TEST_CASE("retrieval matches an exhaustive sort") {
    ragopt::Rng rng(5);
    EmbeddingStore store(TrigramHasher{TrigramHasher{}.seed, 32});
    for (std::size_t n : {1u, 2u, 3u, 10u, 17u, 40u, 64u}) {
        std::vector<FaqEntry> entries;
        for (std::size_t i = 0; i < n; ++i) {
            // some duplicated texts force score ties
            const std::size_t t = i % 7 == 6 ? i - 1 : i;
            entries.push_back({"id" + std::to_string(1000 - i), "question " + std::to_string(t * 37 % 11) + " about x" + std::to_string(t),
                               "answer " + std::to_string(t)});
        }
        FaqCorpus corpus("p", entries);
        ProjectionHead head{testutil::random_matrix(rng, 32), 0.1, 8};
        const std::string query = "question 3 about x" + std::to_string(n / 2);
        std::vector<ScoredFaq> oracle;
        for (const auto& e : corpus.entries()) oracle.push_back({e.id, project_sim(head, store.embed(query), store.embed(e.qna_text()))});
        std::sort(oracle.begin(), oracle.end(), [](const auto& a, const auto& b) { return a.score != b.score ? a.score > b.score : a.faq_id < b.faq_id; });
        for (std::size_t k : {std::size_t{1}, std::min<std::size_t>(3, n), n}) {
            const auto got = retrieve_topk(store, head, corpus, query, k).ranked;
            REQUIRE(got.size() == k);
            for (std::size_t i = 0; i < k; ++i) {
                CHECK(got[i].faq_id == oracle[i].faq_id);
                CHECK_THAT(got[i].score, WithinAbs(oracle[i].score, 1e-12));
            }
        }
    }
}

TEST_CASE("retrieval edge cases") {
    EmbeddingStore store;
    auto corpus = load_corpus(testutil::data_dir() / "faq_corpus.json");
    const auto head = ProjectionHead::identity(store.dimension());
    const auto& e = corpus.entries()[3];
    const auto top = retrieve_topk(store, head, corpus, e.qna_text(), 3).ranked;
    CHECK(top[0].faq_id == e.id);
    CHECK_THAT(top[0].score, WithinAbs(1.0, 1e-9));
    CHECK(top[0].score >= top[1].score);
    CHECK(top[1].score >= top[2].score);
    CHECK_THROWS_AS(retrieve_topk(store, head, corpus, "x", 0), ValidationError);
    CHECK_THROWS_AS(retrieve_topk(store, head, corpus, "x", 11), ValidationError);
}

TEST_CASE("infoNCE symmetric batch") {
    const Vector v{0.2, -0.4, 0.9, 0.1};
    std::vector<PositivePair> batch(8, PositivePair{v, v});
    const auto head = ProjectionHead::identity(4);
    const auto r = infonce_loss(head, batch);
    REQUIRE(r.ratios.size() == 16);
    for (double l : r.ratios) CHECK_THAT(l, WithinAbs(1.0 / 15.0, 1e-9));
    CHECK_THAT(r.loss, WithinAbs(std::log(15.0), 1e-9));
}

TEST_CASE("infoNCE matches the scalar oracle") {
    ragopt::Rng rng(3);
    SECTION("hand-built B=2") {
        std::vector<PositivePair> batch{{{1, 0, 0}, {0.9, 0.1, 0}}, {{0, 1, 0}, {0, 0.8, 0.3}}};
        auto head = ProjectionHead::identity(3);
        CHECK_THAT(infonce_loss(head, batch).loss, WithinAbs(infonce_oracle(head.weights, batch, 0.1), 1e-12));
    }
    SECTION("random batches") {
        for (int t = 0; t < 10; ++t) {
            std::vector<PositivePair> batch;
            for (int b = 0; b < 3; ++b) batch.push_back({testutil::random_vector(rng, 5), testutil::random_vector(rng, 5)});
            ProjectionHead head{testutil::random_matrix(rng, 5), 0.1, 3};
            CHECK_THAT(infonce_loss(head, batch).loss, WithinAbs(infonce_oracle(head.weights, batch, 0.1), 1e-10));
        }
    }
    SECTION("batch of one") {
        std::vector<PositivePair> batch{{{1, 0}, {0, 1}}};
        CHECK_THROWS_AS(infonce_loss(ProjectionHead::identity(2), batch), BatchTooSmall);
    }
}

TEST_CASE("infoNCE gradient vs finite differences") {
    ragopt::Rng rng(17);
    for (int t = 0; t < 20; ++t) {
        std::vector<PositivePair> batch;
        for (int b = 0; b < 2; ++b) batch.push_back({testutil::random_vector(rng, 4), testutil::random_vector(rng, 4)});
        ProjectionHead head{testutil::random_matrix(rng, 4), 0.1, 2};
        const auto r = infonce_loss(head, batch);
        const double err = max_fd_error(head.weights, r.grad, [&](const Matrix& w) {
            ProjectionHead h{w, 0.1, 2};
            return infonce_loss(h, batch).loss;
        });
        CHECK(err < 1e-4);
    }
}

TEST_CASE("triplet loss") {
    ragopt::Rng rng(23);
    const auto head = ProjectionHead::identity(3);
    SECTION("inactive hinge") {
        const auto r = triplet_loss(head, Vector{1, 0, 0}, Vector{1, 0.01, 0}, Vector{0, 1, 0}, 0.2);
        CHECK(r.loss == 0.0);
        for (double g : r.grad.data()) CHECK(g == 0.0);
    }
    SECTION("all three equal gives the margin") {
        const Vector a{0.3, 0.4, 0.5};
        CHECK_THAT(triplet_loss(head, a, a, a, 0.2).loss, WithinAbs(0.2, 1e-12));
    }
    SECTION("finite differences where the hinge is active") {
        int checked = 0;
        while (checked < 20) {
            const auto a = testutil::random_vector(rng, 4), p = testutil::random_vector(rng, 4), n = testutil::random_vector(rng, 4);
            ProjectionHead h{testutil::random_matrix(rng, 4), 0.1, 8};
            const auto r = triplet_loss(h, a, p, n, 0.2);
            if (r.loss < 1e-3) continue;
            ++checked;
            const double err = max_fd_error(h.weights, r.grad, [&](const Matrix& w) {
                ProjectionHead hh{w, 0.1, 8};
                return triplet_loss(hh, a, p, n, 0.2).loss;
            });
            CHECK(err < 1e-4);
        }
    }
}

TEST_CASE("train_head") {
    auto corpus = load_corpus(testutil::data_dir() / "faq_corpus.json");
    EmbeddingStore store;
    const auto pairs = synth_paraphrases(corpus, 8, 1);
    const auto head = ProjectionHead::identity(store.dimension());

    SECTION("zero learning rate is the identity") {
        const auto r = train_head(head, pairs, store, corpus, {3, 0.0, HeadLoss::InfoNce, 7, 0.2});
        CHECK(r.head.weights == head.weights);
    }
    SECTION("deterministic and loss decreases") {
        const HeadTrainConfig cfg{5, 0.05, HeadLoss::InfoNce, 7, 0.2};
        const auto a = train_head(head, pairs, store, corpus, cfg);
        const auto b = train_head(head, pairs, store, corpus, cfg);
        CHECK(a.head.weights == b.head.weights);
        CHECK(a.loss_trace == b.loss_trace);
        REQUIRE(a.loss_trace.size() == 6);
        CHECK(a.loss_trace.back() < a.loss_trace.front());
    }
    SECTION("triplet path decreases too") {
        const auto r = train_head(head, pairs, store, corpus, {5, 0.05, HeadLoss::Triplet, 7, 0.2});
        CHECK(r.loss_trace.back() < r.loss_trace.front());
    }
    SECTION("too few pairs") {
        std::vector<ParaphrasePair> few(pairs.begin(), pairs.begin() + 3);
        CHECK_THROWS_AS(train_head(head, few, store, corpus, {}), InsufficientData);
    }
    SECTION("20 epochs beat the identity on held-out paraphrases") {
        const auto held = synth_paraphrases(corpus, 6, 99);
        std::vector<LabeledQuery> labeled;
        for (const auto& p : held) labeled.push_back({p.query, p.faq_id});
        const auto trained = train_head(head, synth_paraphrases(corpus, 24, 1), store, corpus, {});
        CHECK(eval_retrieval(store, trained.head, corpus, labeled).top1 > eval_retrieval(store, head, corpus, labeled).top1);
    }
}

TEST_CASE("evaluation metrics") {
    auto corpus = load_corpus(testutil::data_dir() / "faq_corpus.json");
    EmbeddingStore store;
    const auto head = ProjectionHead::identity(store.dimension());
    std::vector<LabeledQuery> exact;
    std::vector<std::string> texts;
    for (const auto& e : corpus.entries()) {
        exact.push_back({e.qna_text(), e.id});
        texts.push_back(e.qna_text());
    }
    const auto m = eval_retrieval(store, head, corpus, exact);
    CHECK(m.top1 == 1.0);
    CHECK(m.top3 == 1.0);
    CHECK_THROWS_AS(eval_retrieval(store, head, corpus, {}), InsufficientData);
    const std::vector<std::string> ood{"hows weather today", "play a song"};
    const auto sep = ood_separation(store, head, corpus, texts, ood);
    CHECK_THAT(sep.mean_top1_in, WithinAbs(1.0, 1e-9));
    CHECK(sep.gap() > 0.0);
    CHECK_THROWS_AS(ood_separation(store, head, corpus, texts, {}), InsufficientData);
}
