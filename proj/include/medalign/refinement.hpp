#pragma once

#include "medalign/dictionary.hpp"
#include "medalign/encoders.hpp"
#include "medalign/objectives.hpp"

#include <optional>
#include <set>
#include <string>
#include <vector>

namespace medalign {

enum class GroupKind { original, positive, negative };

std::string to_string(GroupKind k);

struct ScoredSentence {
    std::string text;
    double score = 0.0;
};

// A candidate sentence set: the original sentence, or a disease's positive
// or negative sentences. ss is the arithmetic mean of member scores.
struct SentenceGroup {
    GroupKind kind = GroupKind::original;
    std::string disease;  // empty for the original group
    std::vector<ScoredSentence> sentences;
    std::string representative;  // manual template; the sentence itself for original
    double avg_score = 0.0;
    int original_position = -1;  // assembly order, used for stable ties
};

struct SupplementProvenance {
    std::string disease;
    GroupKind kind = GroupKind::positive;
    int group_rank = -1;  // position in the ordered group list
    double similarity = 0.0;
    double itm_probability = 0.0;
};

struct RefinedSentence {
    std::string original;
    std::optional<std::string> supplement;
    std::optional<SupplementProvenance> provenance;
};

struct GlobalNegative {
    std::string disease;
    std::string text;
    double score = 0.0;
};

struct RefinedReport {
    std::vector<RefinedSentence> sentences;
    std::vector<GlobalNegative> global_negatives;  // at most 3
    std::set<std::string> detected_diseases;
};

enum class SupplementPolicy { manual_template, top_similarity };

std::string to_string(SupplementPolicy p);
SupplementPolicy supplement_policy_from_string(const std::string& s);

struct RefineConfig {
    double itm_threshold = 0.5;
    SupplementPolicy policy = SupplementPolicy::manual_template;
};

// Similarity and matching metrics for one fixed image. Implemented by the
// trained model and by a mock table for tests.
class RefinementScorer {
public:
    virtual ~RefinementScorer() = default;
    virtual double similarity(const std::string& sentence) = 0;
    virtual double itm_match_probability(const std::string& sentence) = 0;
};

class ModelScorer : public RefinementScorer {
public:
    ModelScorer(const nn::Matrix& image, const ModelState& state);
    double similarity(const std::string& sentence) override;
    double itm_match_probability(const std::string& sentence) override;

private:
    const ModelState& state_;
    ImageRepr image_repr_;
};

// JSON fixture: {"similarity": {text: score}, "itm": {text: probability}}
class MockScorer : public RefinementScorer {
public:
    static MockScorer from_json_file(const std::filesystem::path& path);
    MockScorer(std::map<std::string, double> similarity, std::map<std::string, double> itm);
    double similarity(const std::string& sentence) override;
    double itm_match_probability(const std::string& sentence) override;

private:
    std::map<std::string, double> similarity_, itm_;
};

// --- operations -------------------------------------------------------------

// Case-insensitive substring matching of dictionary keywords.
std::set<std::string> detect_keywords(const std::string& sentence, const KeywordIndex& index);

// [original] then, per detected disease in dictionary order, its positive
// and negative groups. Scores are left at 0 until score_groups runs.
std::vector<SentenceGroup> assemble_groups(const std::string& sentence,
                                           const std::set<std::string>& detected,
                                           const ClinicalDictionary& dict);

// Single-sentence local-alignment similarity under the trained model.
double score_sentence(const nn::Matrix& image, const std::string& sentence,
                      const ModelState& state);
// same, reusing an already-encoded image
double score_sentence_repr(const ImageRepr& image_repr, const std::string& sentence,
                           const ModelState& state);

void score_groups(std::vector<SentenceGroup>& groups, RefinementScorer& scorer);

// Groups by ss descending (stable in assembly order); sentences within a
// group by score descending, ties lexicographic.
std::vector<SentenceGroup> order_groups(const std::vector<SentenceGroup>& groups);

// The ITM-gated supplement rule; `ordered` must contain exactly one
// original group.
std::optional<std::pair<std::string, SupplementProvenance>> select_supplement(
    const std::vector<SentenceGroup>& ordered, RefinementScorer& scorer,
    const RefineConfig& config);

// Top-3 best-scoring manual negative templates among undetected diseases.
std::vector<GlobalNegative> append_global_negatives(const std::set<std::string>& detected,
                                                    const ClinicalDictionary& dict,
                                                    RefinementScorer& scorer);

RefinedReport refine_report(const std::string& report, const ClinicalDictionary& dict,
                            RefinementScorer& scorer, const RefineConfig& config);
RefinedReport refine_report(const nn::Matrix& image, const std::string& report,
                            const ClinicalDictionary& dict, const ModelState& state,
                            const RefineConfig& config);

// Supplements in parentheses after their sentence, global negatives at the
// end. Supplement terminators move outside the closing parenthesis so the
// refined text splits back into the same sentence units.
std::string render_refined_text(const RefinedReport& report);

std::string refined_report_to_json(const RefinedReport& report, const std::string& sample_id,
                                   bool refined);

}  // namespace medalign
