#pragma once

#include "medalign/encoders.hpp"

#include <array>
#include <vector>

namespace medalign {

struct BatchRepr {
    std::vector<ImageRepr> images;
    std::vector<TextRepr> texts;  // paired by index
};

struct AlignmentResult {
    nn::Matrix similarity;        // s: K_t x K_v
    nn::Matrix attention;         // a: K_t x K_v, rows sum to 1
    nn::Matrix context_enhanced;  // K_t x C
    double match_score;           // M
};

// Symmetric InfoNCE between whole-image and whole-report embeddings;
// cosine similarities scaled by 1/tau1, both retrieval directions averaged
// over the batch and summed.
double global_contrastive_loss(const BatchRepr& batch, double tau1);

// s = text · image^T; a = row softmax of s/tau2; context rows are
// attention-weighted sums over all image rows (class row included);
// M = tau3 * log sum_i exp(<context_i, text_i>/tau3).
AlignmentResult local_alignment(const nn::Matrix& text_local, const nn::Matrix& image_local,
                                double tau2, double tau3);

// Symmetric InfoNCE over the N x N matching-score matrix with temperature
// tau2.
double local_contrastive_loss(const std::vector<ImageRepr>& images,
                              const std::vector<TextRepr>& texts, double tau2, double tau3);
// raw-pair form: encodes with the model first
double local_contrastive_loss(const std::vector<nn::Matrix>& images,
                              const std::vector<SentenceSplit>& splits, const ModelState& state,
                              double tau2, double tau3);

struct ItmNegative {
    int image_index;
    int report_index;    // != image_index
    int sentence_index;  // into the unpaired report's sentences
};

// One negative per image: a uniformly chosen sentence from a uniformly
// chosen unpaired report. No hard-negative mining.
std::vector<ItmNegative> itm_sample_negatives(const std::vector<SentenceSplit>& batch, Rng& rng);

enum class ItmLabel { match, no_match };

double itm_loss(const std::vector<std::array<double, 2>>& logits,
                const std::vector<ItmLabel>& labels);

// Mean cross-entropy over masked positions; exactly 0 with no targets.
double mlm_loss(const nn::Matrix& token_logits, const std::vector<int>& target_ids);

struct LossComponents {
    double global_contrastive = 0.0;
    double local_contrastive = 0.0;
    double itm = 0.0;
    double mlm = 0.0;
};

double total_loss(const LossComponents& c);

// --- graph route (training / gradient checks) -------------------------------

struct BatchPlan {
    std::vector<std::vector<int>> mask_positions;  // per sample, sorted
    std::vector<int> positive_sentence;            // per sample
    std::vector<ItmNegative> negatives;            // empty when N == 1
};

BatchPlan make_batch_plan(const std::vector<SentenceSplit>& splits, double mask_ratio, Rng& rng);

struct BatchLossGraph {
    nn::Tensor global_contrastive;
    nn::Tensor local_contrastive;
    nn::Tensor itm;
    nn::Tensor mlm;
    nn::Tensor total;
};

BatchLossGraph batch_total_loss(const std::vector<nn::Matrix>& images,
                                const std::vector<SentenceSplit>& splits, const BatchPlan& plan,
                                const ModelState& state, double tau1, double tau2, double tau3);

// graph-level pieces (exposed so the value-level API and the trainer share
// one formula implementation)
nn::Tensor global_contrastive_loss_graph(const std::vector<nn::Tensor>& image_globals,
                                         const std::vector<nn::Tensor>& text_globals, double tau1);

struct AlignmentGraph {
    nn::Tensor similarity;
    nn::Tensor attention;
    nn::Tensor context_enhanced;
    nn::Tensor match_score;  // 1x1
};
AlignmentGraph local_alignment_graph(const nn::Tensor& text_local, const nn::Tensor& image_local,
                                     double tau2, double tau3);

nn::Tensor local_contrastive_loss_graph(const std::vector<nn::Tensor>& image_locals,
                                        const std::vector<nn::Tensor>& text_locals, double tau2,
                                        double tau3);

}  // namespace medalign
