#include "ragopt/embedding.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "json.hpp"
#include "ragopt/error.hpp"
#include "ragopt/io.hpp"
#include "ragopt/rng.hpp"
#include "ragopt/text.hpp"

namespace ragopt {

using nlohmann::json;

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

Vector Matrix::apply(std::span<const double> x) const {
    if (x.size() != cols_) throw DimensionMismatch("matrix has " + std::to_string(cols_) + " columns, vector has " + std::to_string(x.size()));
    Vector y(rows_, 0.0);
    for (std::size_t r = 0; r < rows_; ++r) {
        const double* row = &data_[r * cols_];
        double acc = 0.0;
        for (std::size_t c = 0; c < cols_; ++c) acc += row[c] * x[c];
        y[r] = acc;
    }
    return y;
}

void Matrix::add_outer(double scale, std::span<const double> u, std::span<const double> v) {
    for (std::size_t r = 0; r < rows_; ++r) {
        const double s = scale * u[r];
        if (s == 0.0) continue;
        double* row = &data_[r * cols_];
        for (std::size_t c = 0; c < cols_; ++c) row[c] += s * v[c];
    }
}

void Matrix::axpy(double scale, const Matrix& other) {
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += scale * other.data_[i];
}

bool Matrix::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

double dot(std::span<const double> a, std::span<const double> b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

double cosine(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size())
        throw DimensionMismatch("cosine of vectors with dimensions " + std::to_string(a.size()) + " and " + std::to_string(b.size()));
    const double na = norm(a);
    const double nb = norm(b);
    if (na == 0.0 || nb == 0.0) throw ZeroVector("cosine of a zero vector");
    return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

namespace {

std::uint64_t fnv1a(std::string_view s, std::uint64_t seed) {
    std::uint64_t h = 0xcbf29ce484222325ULL ^ mix64(seed);
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return mix64(h);
}

}  // namespace

Vector TrigramHasher::operator()(std::string_view raw) const {
    std::string t = text::normalize(raw);
    if (t.empty()) t = "<empty>";
    const std::string padded = " " + t + " ";
    Vector v(dimension, 0.0);
    for (std::size_t i = 0; i + 3 <= padded.size(); ++i) {
        const std::uint64_t h = fnv1a(std::string_view(padded).substr(i, 3), seed);
        const std::size_t bucket = static_cast<std::size_t>(h % dimension);
        v[bucket] += (h >> 63) ? -1.0 : 1.0;
    }
    double n = norm(v);
    if (n == 0.0) {
        // Every trigram cancelled out; fall back to the sign of the whole-text hash.
        const std::uint64_t h = fnv1a(padded, seed);
        v[h % dimension] = 1.0;
        n = 1.0;
    }
    for (auto& x : v) x /= n;
    return v;
}

EmbeddingStore::EmbeddingStore(TrigramHasher fallback) : fallback_(fallback) {
    if (fallback_.dimension == 0) throw ValidationError("embedding dimension must be positive");
}

EmbeddingStore::EmbeddingStore(std::size_t dimension, std::map<std::string, Vector> base_vectors, std::uint64_t hash_seed)
    : fallback_{hash_seed, dimension}, base_(std::move(base_vectors)) {
    if (dimension == 0) throw ValidationError("embedding dimension must be positive");
    for (const auto& [key, v] : base_) {
        if (v.size() != dimension)
            throw ValidationError("embedding for '" + key + "' has dimension " + std::to_string(v.size()) + ", expected " + std::to_string(dimension));
        if (!std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); }))
            throw ValidationError("embedding for '" + key + "' has non-finite entries");
    }
}

EmbeddingStore EmbeddingStore::parse(std::string_view json_text) {
    json doc;
    try {
        doc = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw ParseError(std::string("embedding file: ") + e.what());
    }
    if (!doc.is_object() || !doc.contains("dimension") || !doc["dimension"].is_number_unsigned())
        throw ParseError("embedding file: missing unsigned 'dimension'");
    std::map<std::string, Vector> vectors;
    if (auto it = doc.find("vectors"); it != doc.end()) {
        if (!it->is_object()) throw ParseError("embedding file: 'vectors' must be an object");
        for (const auto& [key, val] : it->items()) {
            if (!val.is_array()) throw ParseError("embedding file: vector for '" + key + "' is not an array");
            vectors[key] = val.get<Vector>();
        }
    }
    return EmbeddingStore(doc["dimension"].get<std::size_t>(), std::move(vectors));
}

EmbeddingStore EmbeddingStore::load(const std::filesystem::path& path) { return parse(read_file(path)); }

Vector EmbeddingStore::embed(std::string_view text) const {
    if (!base_.empty()) {
        auto it = base_.find(std::string(text));
        if (it != base_.end()) return it->second;
    }
    return fallback_(text);
}

ProjectionHead ProjectionHead::identity(std::size_t dimension, double tau, std::size_t batch_size) {
    ProjectionHead h{Matrix::identity(dimension), tau, batch_size};
    h.validate();
    return h;
}

void ProjectionHead::validate() const {
    if (!(tau > 0.0)) throw ValidationError("projection head temperature must be positive");
    if (weights.rows() != weights.cols() || weights.rows() == 0) throw ValidationError("projection head must be square and non-empty");
    if (!weights.all_finite()) throw ValidationError("projection head has non-finite weights");
}

std::string head_to_json(const ProjectionHead& head) {
    json doc = {{"dimension", head.dimension()},
                {"tau", head.tau},
                {"W", std::vector<double>(head.weights.data().begin(), head.weights.data().end())}};
    return doc.dump() + "\n";
}

ProjectionHead head_from_json(std::string_view json_text) {
    json doc;
    try {
        doc = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw ParseError(std::string("head file: ") + e.what());
    }
    if (!doc.is_object() || !doc.contains("dimension") || !doc.contains("tau") || !doc.contains("W"))
        throw ParseError("head file: expected fields dimension, tau, W");
    const auto d = doc["dimension"].get<std::size_t>();
    const auto w = doc["W"].get<std::vector<double>>();
    if (w.size() != d * d) throw ValidationError("head file: W has " + std::to_string(w.size()) + " entries, expected d*d");
    ProjectionHead head{Matrix(d, d), doc["tau"].get<double>(), 8};
    std::copy(w.begin(), w.end(), head.weights.data().begin());
    head.validate();
    return head;
}

void save_head(const std::filesystem::path& path, const ProjectionHead& head) { write_file_atomic(path, head_to_json(head)); }

ProjectionHead load_head(const std::filesystem::path& path) { return head_from_json(read_file(path)); }

double project_sim(const ProjectionHead& head, std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw DimensionMismatch("project_sim of vectors with different dimensions");
    return cosine(head.weights.apply(a), head.weights.apply(b));
}

namespace {

Vector unit(Vector v) {
    const double n = norm(v);
    if (n == 0.0) throw ZeroVector("projected vector vanished");
    for (auto& x : v) x /= n;
    return v;
}

void check_k(const FaqCorpus& corpus, std::size_t k) {
    if (corpus.size() == 0) throw EmptyCorpus("retrieval over an empty corpus");
    if (k == 0 || k > corpus.size())
        throw ValidationError("k=" + std::to_string(k) + " outside [1, " + std::to_string(corpus.size()) + "]");
}

}  // namespace

Retriever::Retriever(const EmbeddingStore& store, const ProjectionHead& head, const FaqCorpus& corpus)
    : store_(&store), head_(&head), corpus_(&corpus) {
    if (corpus.size() == 0) throw EmptyCorpus("retrieval over an empty corpus");
    if (store.dimension() != head.dimension()) throw DimensionMismatch("embedding store and projection head dimensions differ");
    faq_units_.reserve(corpus.size());
    for (const auto& e : corpus.entries()) faq_units_.push_back(unit(head.weights.apply(store.embed(e.qna_text()))));
}

const Vector& Retriever::projected(const std::string& text) {
    auto it = cache_.find(text);
    if (it != cache_.end()) return it->second;
    return cache_.emplace(text, unit(head_->weights.apply(store_->embed(text)))).first->second;
}

double Retriever::similarity(const std::string& a, const std::string& b) {
    const Vector& ua = projected(a);
    return std::clamp(dot(ua, projected(b)), -1.0, 1.0);
}

double Retriever::faq_similarity(const std::string& query, std::string_view faq_id) {
    const auto& entries = corpus_->entries();
    for (std::size_t i = 0; i < entries.size(); ++i)
        if (entries[i].id == faq_id) return std::clamp(dot(projected(query), faq_units_[i]), -1.0, 1.0);
    throw ValidationError("unknown FAQ id '" + std::string(faq_id) + "'");
}

RetrievalResult Retriever::topk(const std::string& query, std::size_t k) {
    check_k(*corpus_, k);
    const Vector& q = projected(query);
    std::vector<ScoredFaq> all;
    all.reserve(faq_units_.size());
    for (std::size_t i = 0; i < faq_units_.size(); ++i)
        all.push_back({corpus_->entries()[i].id, std::clamp(dot(q, faq_units_[i]), -1.0, 1.0)});
    std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k), all.end(), [](const ScoredFaq& a, const ScoredFaq& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.faq_id < b.faq_id;
    });
    all.resize(k);
    return {std::move(all)};
}

RetrievalResult retrieve_topk(const EmbeddingStore& store, const ProjectionHead& head, const FaqCorpus& corpus,
                              const std::string& query, std::size_t k) {
    check_k(corpus, k);
    Retriever r(store, head, corpus);
    return r.topk(query, k);
}

namespace {

struct Projected {
    Vector unit;
    double length = 0.0;
};

Projected project(const Matrix& w, std::span<const double> x) {
    Vector u = w.apply(x);
    const double n = norm(u);
    if (n == 0.0) throw ZeroVector("projected vector vanished");
    for (auto& v : u) v /= n;
    return {std::move(u), n};
}

// Converts a gradient with respect to the unit vector u/|u| into one with
// respect to u: (g - (g.u_hat) u_hat) / |u|.
Vector through_normalization(const Projected& p, const Vector& g) {
    const double along = dot(g, p.unit);
    Vector out(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) out[i] = (g[i] - along * p.unit[i]) / p.length;
    return out;
}

}  // namespace

InfoNceResult infonce_loss(const ProjectionHead& head, std::span<const PositivePair> batch) {
    if (batch.size() < 2) throw BatchTooSmall("infoNCE needs at least 2 positive pairs, got " + std::to_string(batch.size()));
    const std::size_t views = 2 * batch.size();
    const std::size_t d = head.dimension();
    std::vector<const Vector*> inputs(views);
    std::vector<Projected> z(views);
    for (std::size_t b = 0; b < batch.size(); ++b) {
        inputs[2 * b] = &batch[b].anchor;
        inputs[2 * b + 1] = &batch[b].positive;
    }
    for (std::size_t i = 0; i < views; ++i) {
        if (inputs[i]->size() != d) throw DimensionMismatch("batch vector dimension differs from head dimension");
        z[i] = project(head.weights, *inputs[i]);
    }

    std::vector<double> sim(views * views);
    for (std::size_t i = 0; i < views; ++i)
        for (std::size_t k = i; k < views; ++k) sim[i * views + k] = sim[k * views + i] = dot(z[i].unit, z[k].unit);

    InfoNceResult res;
    res.ratios.resize(views);
    // coef[i*views+k] = dLoss/dsim(i,k) as seen from row i.
    std::vector<double> coef(views * views, 0.0);
    const double inv_tau = 1.0 / head.tau;
    const double inv_views = 1.0 / static_cast<double>(views);
    for (std::size_t i = 0; i < views; ++i) {
        const std::size_t partner = i ^ 1U;
        double max_logit = -INFINITY;
        for (std::size_t k = 0; k < views; ++k)
            if (k != i) max_logit = std::max(max_logit, sim[i * views + k] * inv_tau);
        double denom = 0.0;
        for (std::size_t k = 0; k < views; ++k)
            if (k != i) denom += std::exp(sim[i * views + k] * inv_tau - max_logit);
        const double log_denom = max_logit + std::log(denom);
        const double log_ratio = sim[i * views + partner] * inv_tau - log_denom;
        res.ratios[i] = std::exp(log_ratio);
        res.loss -= log_ratio * inv_views;
        for (std::size_t k = 0; k < views; ++k) {
            if (k == i) continue;
            const double p = std::exp(sim[i * views + k] * inv_tau - log_denom);
            coef[i * views + k] = inv_views * inv_tau * (p - (k == partner ? 1.0 : 0.0));
        }
    }

    res.grad = Matrix(d, d);
    Vector g(d);
    for (std::size_t i = 0; i < views; ++i) {
        std::fill(g.begin(), g.end(), 0.0);
        for (std::size_t k = 0; k < views; ++k) {
            if (k == i) continue;
            // sim(i,k) appears in row i and in row k.
            const double c = coef[i * views + k] + coef[k * views + i];
            for (std::size_t t = 0; t < d; ++t) g[t] += c * z[k].unit[t];
        }
        res.grad.add_outer(1.0, through_normalization(z[i], g), *inputs[i]);
    }
    return res;
}

LossAndGrad triplet_loss(const ProjectionHead& head, std::span<const double> anchor, std::span<const double> positive,
                         std::span<const double> negative, double margin) {
    if (!(margin > 0.0)) throw ValidationError("triplet margin must be positive");
    const std::size_t d = head.dimension();
    if (anchor.size() != d || positive.size() != d || negative.size() != d)
        throw DimensionMismatch("triplet vector dimension differs from head dimension");
    const Projected a = project(head.weights, anchor);
    const Projected p = project(head.weights, positive);
    const Projected n = project(head.weights, negative);
    const double sap = dot(a.unit, p.unit);
    const double san = dot(a.unit, n.unit);
    LossAndGrad res{std::max(0.0, margin - sap + san), Matrix(d, d)};
    if (margin - sap + san <= 0.0) return res;
    // d/d(unit vectors) of (-sap + san)
    Vector ga(d), gp(d), gn(d);
    for (std::size_t t = 0; t < d; ++t) {
        ga[t] = -p.unit[t] + n.unit[t];
        gp[t] = -a.unit[t];
        gn[t] = a.unit[t];
    }
    res.grad.add_outer(1.0, through_normalization(a, ga), anchor);
    res.grad.add_outer(1.0, through_normalization(p, gp), positive);
    res.grad.add_outer(1.0, through_normalization(n, gn), negative);
    return res;
}

namespace {

struct EncodedPair {
    Vector query;
    Vector positive;
    std::size_t faq = 0;
    PairKind kind = PairKind::QueryQuestion;
};

// Packs indices into batches of `size` whose FAQs are pairwise distinct when
// the corpus allows it. Leftovers that cannot fill a batch are dropped.
std::vector<std::vector<std::size_t>> make_batches(std::vector<std::size_t> order, const std::vector<EncodedPair>& pairs,
                                                   std::size_t size, bool distinct) {
    std::vector<std::vector<std::size_t>> batches;
    std::vector<bool> used(order.size(), false);
    std::size_t remaining = order.size();
    std::size_t start = 0;
    while (remaining >= size) {
        std::vector<std::size_t> batch;
        std::vector<std::size_t> faqs;
        for (std::size_t j = start; j < order.size() && batch.size() < size; ++j) {
            if (used[j]) continue;
            const std::size_t f = pairs[order[j]].faq;
            if (distinct && std::find(faqs.begin(), faqs.end(), f) != faqs.end()) continue;
            used[j] = true;
            batch.push_back(order[j]);
            faqs.push_back(f);
        }
        if (batch.size() < size) break;
        remaining -= batch.size();
        while (start < order.size() && used[start]) ++start;
        batches.push_back(std::move(batch));
    }
    return batches;
}

}  // namespace

HeadTrainResult train_head(const ProjectionHead& initial, std::span<const ParaphrasePair> pairs, const EmbeddingStore& store,
                           const FaqCorpus& corpus, const HeadTrainConfig& config) {
    initial.validate();
    const std::size_t B = initial.batch_size;
    if (B < 2) throw ValidationError("batch size must be at least 2");
    if (pairs.size() < B)
        throw InsufficientData("train_head needs at least " + std::to_string(B) + " pairs, got " + std::to_string(pairs.size()));
    if (store.dimension() != initial.dimension()) throw DimensionMismatch("embedding store and projection head dimensions differ");

    std::vector<EncodedPair> enc;
    enc.reserve(pairs.size());
    std::vector<std::size_t> faq_index_of;
    for (const auto& p : pairs) {
        const auto& entries = corpus.entries();
        auto it = std::find_if(entries.begin(), entries.end(), [&](const FaqEntry& e) { return e.id == p.faq_id; });
        if (it == entries.end()) throw ValidationError("paraphrase pair references unknown FAQ '" + p.faq_id + "'");
        enc.push_back({store.embed(p.query), store.embed(p.kind == PairKind::QueryQna ? it->qna_text() : it->question),
                       static_cast<std::size_t>(it - entries.begin()), p.kind});
    }
    const bool distinct = corpus.size() >= B;

    HeadTrainResult result{initial, {}};
    ProjectionHead& head = result.head;

    Rng rng(derive_seed(config.seed, {0x4ead}));

    // Triplet negatives: the same-kind positive of a different FAQ, fixed per
    // (epoch, pair) through the generator.
    auto negative_for = [&](std::size_t idx, Rng& g) -> const Vector& {
        for (int attempt = 0; attempt < 64; ++attempt) {
            const std::size_t j = g.below(enc.size());
            if (enc[j].faq != enc[idx].faq) return enc[j].positive;
        }
        return enc[(idx + 1) % enc.size()].positive;
    };

    auto batch_loss = [&](const std::vector<std::size_t>& batch, Rng& g, bool want_grad) -> LossAndGrad {
        if (config.loss == HeadLoss::InfoNce) {
            std::vector<PositivePair> pp;
            pp.reserve(batch.size());
            for (auto i : batch) pp.push_back({enc[i].query, enc[i].positive});
            auto r = infonce_loss(head, pp);
            return {r.loss, std::move(r.grad)};
        }
        LossAndGrad acc{0.0, Matrix(head.dimension(), head.dimension())};
        const double w = 1.0 / static_cast<double>(batch.size());
        for (auto i : batch) {
            auto r = triplet_loss(head, enc[i].query, enc[i].positive, negative_for(i, g), config.margin);
            acc.loss += w * r.loss;
            if (want_grad) acc.grad.axpy(w, r.grad);
        }
        return acc;
    };

    // Fixed evaluation batches so the trace compares like with like.
    std::vector<std::size_t> eval_order(enc.size());
    std::iota(eval_order.begin(), eval_order.end(), 0);
    Rng eval_rng(derive_seed(config.seed, {0xe7a1}));
    eval_rng.shuffle(eval_order);
    const auto eval_batches = make_batches(eval_order, enc, B, distinct);
    auto training_loss = [&]() {
        Rng g(derive_seed(config.seed, {0xe7a2}));
        double total = 0.0;
        for (const auto& b : eval_batches) total += batch_loss(b, g, false).loss;
        return eval_batches.empty() ? 0.0 : total / static_cast<double>(eval_batches.size());
    };

    result.loss_trace.push_back(training_loss());
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        std::vector<std::size_t> order(enc.size());
        std::iota(order.begin(), order.end(), 0);
        rng.shuffle(order);
        Rng neg_rng(derive_seed(config.seed, {0x7e9, epoch}));
        for (const auto& batch : make_batches(std::move(order), enc, B, distinct)) {
            auto r = batch_loss(batch, neg_rng, true);
            if (config.learning_rate != 0.0) head.weights.axpy(-config.learning_rate, r.grad);
        }
        if (!head.weights.all_finite()) throw Error("train_head diverged: non-finite weights");
        result.loss_trace.push_back(training_loss());
    }
    return result;
}

RetrievalMetrics eval_retrieval(const EmbeddingStore& store, const ProjectionHead& head, const FaqCorpus& corpus,
                                std::span<const LabeledQuery> queries) {
    if (queries.empty()) throw InsufficientData("eval_retrieval needs at least one labeled query");
    Retriever r(store, head, corpus);
    const std::size_t k = std::min<std::size_t>(3, corpus.size());
    std::size_t hit1 = 0, hit3 = 0;
    for (const auto& q : queries) {
        if (!corpus.contains(q.faq_id)) throw ValidationError("labeled query references unknown FAQ '" + q.faq_id + "'");
        auto res = r.topk(q.text, k);
        if (res.ranked.front().faq_id == q.faq_id) ++hit1;
        if (std::any_of(res.ranked.begin(), res.ranked.end(), [&](const ScoredFaq& s) { return s.faq_id == q.faq_id; })) ++hit3;
    }
    const double n = static_cast<double>(queries.size());
    return {static_cast<double>(hit1) / n, static_cast<double>(hit3) / n};
}

OodSeparation ood_separation(const EmbeddingStore& store, const ProjectionHead& head, const FaqCorpus& corpus,
                             std::span<const std::string> in_domain, std::span<const std::string> ood) {
    if (in_domain.empty() || ood.empty()) throw InsufficientData("ood_separation needs non-empty in-domain and OOD lists");
    Retriever r(store, head, corpus);
    auto mean_top1 = [&](std::span<const std::string> qs) {
        double s = 0.0;
        for (const auto& q : qs) s += r.top1(q).score;
        return s / static_cast<double>(qs.size());
    };
    return {mean_top1(in_domain), mean_top1(ood)};
}

}  // namespace ragopt
