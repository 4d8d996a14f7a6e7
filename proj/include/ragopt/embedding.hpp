#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "ragopt/corpus.hpp"

namespace ragopt {

using Vector = std::vector<double>;

// Dense row-major matrix.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0) : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    static Matrix identity(std::size_t n);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
    std::span<double> data() { return data_; }
    std::span<const double> data() const { return data_; }

    Vector apply(std::span<const double> x) const;
    // this += scale * u v^T
    void add_outer(double scale, std::span<const double> u, std::span<const double> v);
    // this += scale * other
    void axpy(double scale, const Matrix& other);
    bool all_finite() const;

    bool operator==(const Matrix&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

double dot(std::span<const double> a, std::span<const double> b);
double norm(std::span<const double> a);

// Throws DimensionMismatch or ZeroVector.
double cosine(std::span<const double> a, std::span<const double> b);

// Signed hashing of character trigrams (over the normalized text padded with
// one space on each side) into `dimension` buckets, L2-normalized.
struct TrigramHasher {
    std::uint64_t seed = 0x7261676f;
    std::size_t dimension = 256;

    Vector operator()(std::string_view text) const;
};

class EmbeddingStore {
public:
    explicit EmbeddingStore(TrigramHasher fallback = {});
    EmbeddingStore(std::size_t dimension, std::map<std::string, Vector> base_vectors, std::uint64_t hash_seed = TrigramHasher{}.seed);

    // {"dimension": d, "vectors": {"<text>": [floats]}}
    static EmbeddingStore load(const std::filesystem::path& path);
    static EmbeddingStore parse(std::string_view json_text);

    std::size_t dimension() const { return fallback_.dimension; }
    const std::map<std::string, Vector>& base_vectors() const { return base_; }

    // Stored vector for an exact text key, otherwise the hashed fallback.
    Vector embed(std::string_view text) const;

private:
    TrigramHasher fallback_;
    std::map<std::string, Vector> base_;
};

// The learnable linear map over frozen base vectors.
struct ProjectionHead {
    Matrix weights;
    double tau = 0.1;
    std::size_t batch_size = 8;

    static ProjectionHead identity(std::size_t dimension, double tau = 0.1, std::size_t batch_size = 8);
    std::size_t dimension() const { return weights.rows(); }
    void validate() const;
};

// {"dimension", "tau", "W": row-major floats}
std::string head_to_json(const ProjectionHead& head);
ProjectionHead head_from_json(std::string_view json_text);
void save_head(const std::filesystem::path& path, const ProjectionHead& head);
ProjectionHead load_head(const std::filesystem::path& path);

// cosine(W a, W b)
double project_sim(const ProjectionHead& head, std::span<const double> a, std::span<const double> b);

struct ScoredFaq {
    std::string faq_id;
    double score = 0.0;

    bool operator==(const ScoredFaq&) const = default;
};

struct RetrievalResult {
    std::vector<ScoredFaq> ranked;
};

// Caches projected unit vectors of every FAQ's question+answer text and of
// queries seen so far. Not thread-safe; give each worker its own instance.
class Retriever {
public:
    Retriever(const EmbeddingStore& store, const ProjectionHead& head, const FaqCorpus& corpus);

    const FaqCorpus& corpus() const { return *corpus_; }
    const ProjectionHead& head() const { return *head_; }

    // Unit vector of W * embed(text); zero vector if the projection vanishes.
    const Vector& projected(const std::string& text);

    double similarity(const std::string& a, const std::string& b);
    double faq_similarity(const std::string& query, std::string_view faq_id);
    RetrievalResult topk(const std::string& query, std::size_t k);
    ScoredFaq top1(const std::string& query) { return topk(query, 1).ranked.front(); }

private:
    const EmbeddingStore* store_;
    const ProjectionHead* head_;
    const FaqCorpus* corpus_;
    std::vector<Vector> faq_units_;
    std::unordered_map<std::string, Vector> cache_;
};

// Top-k FAQ ids by project_sim(query, question+answer), descending; ties by
// ascending id. Throws EmptyCorpus, or ValidationError for k outside [1, size].
RetrievalResult retrieve_topk(const EmbeddingStore& store, const ProjectionHead& head, const FaqCorpus& corpus,
                              const std::string& query, std::size_t k);

struct LossAndGrad {
    double loss = 0.0;
    Matrix grad;
};

struct InfoNceResult {
    double loss = 0.0;
    Matrix grad;
    // Softmax ratio of each of the 2B views for its positive partner.
    std::vector<double> ratios;
};

struct PositivePair {
    Vector anchor;
    Vector positive;
};

// Views are interleaved (anchor_0, positive_0, anchor_1, ...); each view's
// denominator sums over every other view. Loss is the mean of -log ratio.
InfoNceResult infonce_loss(const ProjectionHead& head, std::span<const PositivePair> batch);

// max(0, margin - sim(a,p) + sim(a,n)) with its gradient in W.
LossAndGrad triplet_loss(const ProjectionHead& head, std::span<const double> anchor, std::span<const double> positive,
                         std::span<const double> negative, double margin);

enum class HeadLoss { InfoNce, Triplet };

struct HeadTrainConfig {
    std::size_t epochs = 20;
    double learning_rate = 0.05;
    HeadLoss loss = HeadLoss::InfoNce;
    std::uint64_t seed = 7;
    double margin = 0.2;
};

struct HeadTrainResult {
    ProjectionHead head;
    // Entry 0 is the loss before any update; entry e is the mean batch loss of epoch e.
    std::vector<double> loss_trace;
};

// Mini-batch SGD on W. Batches hold pairs of distinct FAQs so in-batch
// negatives are true negatives. Throws InsufficientData with fewer than B pairs.
HeadTrainResult train_head(const ProjectionHead& head, std::span<const ParaphrasePair> pairs, const EmbeddingStore& store,
                           const FaqCorpus& corpus, const HeadTrainConfig& config);

struct LabeledQuery {
    std::string text;
    std::string faq_id;
};

struct RetrievalMetrics {
    double top1 = 0.0;
    double top3 = 0.0;
};

RetrievalMetrics eval_retrieval(const EmbeddingStore& store, const ProjectionHead& head, const FaqCorpus& corpus,
                                std::span<const LabeledQuery> queries);

struct OodSeparation {
    double mean_top1_in = 0.0;
    double mean_top1_ood = 0.0;
    double gap() const { return mean_top1_in - mean_top1_ood; }
};

OodSeparation ood_separation(const EmbeddingStore& store, const ProjectionHead& head, const FaqCorpus& corpus,
                             std::span<const std::string> in_domain, std::span<const std::string> ood);

}  // namespace ragopt
