#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace ragopt {

struct FaqEntry {
    std::string id;
    std::string question;
    std::string answer;

    // Text used for the FAQ's retrieval vector: question followed by answer.
    std::string qna_text() const { return question + " " + answer; }

    bool operator==(const FaqEntry&) const = default;
};

class FaqCorpus {
public:
    FaqCorpus() = default;
    // Validates: at least one entry, non-empty fields, unique ids.
    FaqCorpus(std::string name, std::vector<FaqEntry> entries);

    const std::string& name() const { return name_; }
    const std::vector<FaqEntry>& entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }

    const FaqEntry* find(std::string_view id) const;
    const FaqEntry& at(std::string_view id) const;
    bool contains(std::string_view id) const { return find(id) != nullptr; }

    bool operator==(const FaqCorpus& o) const { return entries_ == o.entries_; }

private:
    std::string name_;
    std::vector<FaqEntry> entries_;
};

enum class PairKind { QueryQuestion, QueryQna };

struct ParaphrasePair {
    std::string query;
    std::string faq_id;
    PairKind kind = PairKind::QueryQuestion;

    bool operator==(const ParaphrasePair&) const = default;
};

enum class StepKind { Domain, Followup, Ood, Greeting };

std::string_view to_string(StepKind k);
StepKind parse_step_kind(std::string_view s);

struct QueryStep {
    std::string text;
    StepKind kind = StepKind::Domain;
    std::optional<std::string> target_faq_id;
    std::optional<std::size_t> depends_on;

    bool operator==(const QueryStep&) const = default;
};

struct SessionScript {
    std::string id;
    std::vector<QueryStep> steps;

    bool operator==(const SessionScript&) const = default;
};

// FAQ file: JSON array of {"id","question","answer"}.
FaqCorpus parse_corpus(std::string_view json_text, std::string name = "corpus");
FaqCorpus load_corpus(const std::filesystem::path& path);
std::string corpus_to_json(const FaqCorpus& corpus);
void write_corpus(const std::filesystem::path& path, const FaqCorpus& corpus);

// Session file: JSON array of {"id","steps":[{"text","kind","target_faq_id"?,"depends_on"?}]}.
std::vector<SessionScript> parse_sessions(std::string_view json_text, const FaqCorpus& corpus);
std::vector<SessionScript> load_sessions(const std::filesystem::path& path, const FaqCorpus& corpus);
std::string sessions_to_json(const std::vector<SessionScript>& sessions);

// Throws ValidationError naming the session and step on any broken invariant.
void validate_session(const SessionScript& session, const FaqCorpus& corpus);

// The FAQ a step is actually about: a FOLLOWUP resolves through its
// dependency chain, DOMAIN uses its own target, OOD/GREETING have none.
std::optional<std::string> effective_target(const SessionScript& session, std::size_t index);

// Seeded permutation of the steps. A FOLLOWUP travels with the step it depends
// on and lands directly after it; depends_on indices are remapped.
SessionScript shuffle_session(const SessionScript& session, std::uint64_t seed);

struct SynthOptions {
    // Adds a code-mixed (Hinglish) lexicon substitution pass.
    bool hinglish = false;
};

// per_faq pairs of each PairKind for every FAQ, built by seeded synonym
// substitution, stop-word dropping and framing templates.
std::vector<ParaphrasePair> synth_paraphrases(const FaqCorpus& corpus, std::size_t per_faq, std::uint64_t seed,
                                              const SynthOptions& options = {});

// Words that carry meaning in a query (not in the stop list).
std::vector<std::string> content_words(std::string_view text);

}  // namespace ragopt
