#include "medalign/objectives.hpp"

#include <cmath>
#include <stdexcept>

namespace medalign {

using nn::Matrix;
using nn::Tensor;

namespace {

void check_tau(double tau, const char* name) {
    if (tau <= 0.0) throw std::invalid_argument(std::string(name) + " must be positive");
}

std::vector<int> identity_targets(size_t n) {
    std::vector<int> t(n);
    for (size_t i = 0; i < n; ++i) t[i] = static_cast<int>(i);
    return t;
}

}  // namespace

Tensor global_contrastive_loss_graph(const std::vector<Tensor>& image_globals,
                                     const std::vector<Tensor>& text_globals, double tau1) {
    check_tau(tau1, "tau1");
    if (image_globals.empty() || image_globals.size() != text_globals.size())
        throw std::invalid_argument("global_contrastive_loss: bad batch");

    // cosine similarity: normalize both sides (the image global is a mean
    // of unit rows, so it is not unit itself)
    std::vector<Tensor> gv, gt;
    gv.reserve(image_globals.size());
    gt.reserve(text_globals.size());
    for (const auto& t : image_globals) gv.push_back(nn::l2_normalize_rows(t));
    for (const auto& t : text_globals) gt.push_back(nn::l2_normalize_rows(t));
    Tensor s = nn::matmul(nn::concat_rows(gv), nn::transpose(nn::concat_rows(gt)));
    const auto targets = identity_targets(image_globals.size());
    Tensor i2t = nn::cross_entropy_rows(nn::scale(s, 1.0 / tau1), targets);
    Tensor t2i = nn::cross_entropy_rows(nn::scale(nn::transpose(s), 1.0 / tau1), targets);
    return nn::add(i2t, t2i);
}

double global_contrastive_loss(const BatchRepr& batch, double tau1) {
    if (batch.images.empty() || batch.images.size() != batch.texts.size())
        throw std::invalid_argument("global_contrastive_loss: bad batch");
    nn::NoGradGuard guard;
    std::vector<Tensor> gv, gt;
    for (const auto& r : batch.images) gv.push_back(nn::constant(r.global));
    for (const auto& r : batch.texts) gt.push_back(nn::constant(r.global));
    return global_contrastive_loss_graph(gv, gt, tau1).scalar();
}

AlignmentGraph local_alignment_graph(const Tensor& text_local, const Tensor& image_local,
                                     double tau2, double tau3) {
    check_tau(tau2, "tau2");
    check_tau(tau3, "tau3");
    if (text_local.rows() < 1 || image_local.rows() < 1)
        throw std::invalid_argument("local_alignment: empty representations");
    if (text_local.cols() != image_local.cols())
        throw std::invalid_argument("local_alignment: dimension mismatch");

    AlignmentGraph g;
    g.similarity = nn::matmul(text_local, nn::transpose(image_local));
    g.attention = nn::softmax_rows(nn::scale(g.similarity, 1.0 / tau2));
    g.context_enhanced = nn::matmul(g.attention, image_local);
    Tensor dots = nn::rowwise_dot(g.context_enhanced, text_local);  // K_t x 1
    g.match_score = nn::scale(nn::logsumexp_all(nn::scale(dots, 1.0 / tau3)), tau3);
    return g;
}

AlignmentResult local_alignment(const Matrix& text_local, const Matrix& image_local, double tau2,
                                double tau3) {
    nn::NoGradGuard guard;
    AlignmentGraph g =
        local_alignment_graph(nn::constant(text_local), nn::constant(image_local), tau2, tau3);
    return AlignmentResult{g.similarity.value(), g.attention.value(), g.context_enhanced.value(),
                           g.match_score.scalar()};
}

Tensor local_contrastive_loss_graph(const std::vector<Tensor>& image_locals,
                                    const std::vector<Tensor>& text_locals, double tau2,
                                    double tau3) {
    check_tau(tau2, "tau2");
    check_tau(tau3, "tau3");
    const size_t n = image_locals.size();
    if (n == 0 || n != text_locals.size())
        throw std::invalid_argument("local_contrastive_loss: bad batch");

    // m(i, j) = matching score of image i against text j
    std::vector<std::vector<Tensor>> grid(n, std::vector<Tensor>(n));
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < n; ++j)
            grid[i][j] = local_alignment_graph(text_locals[j], image_locals[i], tau2, tau3).match_score;
    Tensor m = nn::stack_scalars(grid);
    const auto targets = identity_targets(n);
    Tensor i2t = nn::cross_entropy_rows(nn::scale(m, 1.0 / tau2), targets);
    Tensor t2i = nn::cross_entropy_rows(nn::scale(nn::transpose(m), 1.0 / tau2), targets);
    return nn::add(i2t, t2i);
}

double local_contrastive_loss(const std::vector<ImageRepr>& images,
                              const std::vector<TextRepr>& texts, double tau2, double tau3) {
    nn::NoGradGuard guard;
    std::vector<Tensor> iv, tv;
    for (const auto& r : images) iv.push_back(nn::constant(r.local));
    for (const auto& r : texts) tv.push_back(nn::constant(r.local));
    return local_contrastive_loss_graph(iv, tv, tau2, tau3).scalar();
}

double local_contrastive_loss(const std::vector<Matrix>& images,
                              const std::vector<SentenceSplit>& splits, const ModelState& state,
                              double tau2, double tau3) {
    if (images.size() != splits.size())
        throw std::invalid_argument("local_contrastive_loss: image/text count mismatch");
    std::vector<ImageRepr> iv;
    std::vector<TextRepr> tv;
    for (size_t i = 0; i < images.size(); ++i) {
        iv.push_back(encode_image(images[i], state));
        tv.push_back(encode_text(splits[i], state, 0.0).first);
    }
    return local_contrastive_loss(iv, tv, tau2, tau3);
}

std::vector<ItmNegative> itm_sample_negatives(const std::vector<SentenceSplit>& batch, Rng& rng) {
    const int n = static_cast<int>(batch.size());
    if (n < 2) throw std::invalid_argument("itm_sample_negatives: need at least 2 samples");
    std::vector<ItmNegative> out;
    out.reserve(batch.size());
    for (int i = 0; i < n; ++i) {
        const int r = static_cast<int>(rng.below(static_cast<uint64_t>(n - 1)));
        const int j = r >= i ? r + 1 : r;
        const int s = static_cast<int>(rng.below(batch[static_cast<size_t>(j)].sentences.size()));
        out.push_back({i, j, s});
    }
    return out;
}

double itm_loss(const std::vector<std::array<double, 2>>& logits,
                const std::vector<ItmLabel>& labels) {
    if (logits.size() != labels.size())
        throw std::invalid_argument("itm_loss: logit/label count mismatch");
    if (logits.empty()) throw std::invalid_argument("itm_loss: empty batch");
    double total = 0.0;
    for (size_t i = 0; i < logits.size(); ++i) {
        const double m = std::max(logits[i][0], logits[i][1]);
        const double lse = m + std::log(std::exp(logits[i][0] - m) + std::exp(logits[i][1] - m));
        const double correct = labels[i] == ItmLabel::match ? logits[i][0] : logits[i][1];
        total += lse - correct;
    }
    return total / static_cast<double>(logits.size());
}

double mlm_loss(const Matrix& token_logits, const std::vector<int>& target_ids) {
    if (target_ids.empty()) return 0.0;
    if (token_logits.rows() != static_cast<Eigen::Index>(target_ids.size()))
        throw std::invalid_argument("mlm_loss: logit/target count mismatch");
    nn::NoGradGuard guard;
    return nn::cross_entropy_rows(nn::constant(token_logits), target_ids).scalar();
}

double total_loss(const LossComponents& c) {
    return c.global_contrastive + c.local_contrastive + c.itm + c.mlm;
}

BatchPlan make_batch_plan(const std::vector<SentenceSplit>& splits, double mask_ratio, Rng& rng) {
    if (splits.empty()) throw std::invalid_argument("make_batch_plan: empty batch");
    if (mask_ratio < 0.0 || mask_ratio >= 1.0)
        throw std::invalid_argument("make_batch_plan: mask_ratio must be in [0, 1)");
    BatchPlan plan;
    for (const auto& s : splits) {
        if (mask_ratio > 0.0)
            plan.mask_positions.push_back(
                choose_mask_positions(static_cast<int>(s.token_ids.size()), mask_ratio, rng));
        else
            plan.mask_positions.emplace_back();
    }
    for (const auto& s : splits)
        plan.positive_sentence.push_back(static_cast<int>(rng.below(s.sentences.size())));
    if (splits.size() >= 2) plan.negatives = itm_sample_negatives(splits, rng);
    return plan;
}

BatchLossGraph batch_total_loss(const std::vector<Matrix>& images,
                                const std::vector<SentenceSplit>& splits, const BatchPlan& plan,
                                const ModelState& state, double tau1, double tau2, double tau3) {
    const size_t n = images.size();
    if (n == 0 || n != splits.size() || plan.mask_positions.size() != n ||
        plan.positive_sentence.size() != n)
        throw std::invalid_argument("batch_total_loss: inconsistent batch");

    std::vector<ImageGraph> img;
    std::vector<TextGraph> txt;
    img.reserve(n);
    txt.reserve(n);
    std::vector<int> mlm_targets;
    std::vector<Tensor> mlm_rows;
    for (size_t i = 0; i < n; ++i) {
        img.push_back(state.encode_image_graph(images[i]));
        std::vector<int> ids = splits[i].token_ids;
        for (int pos : plan.mask_positions[i]) {
            mlm_targets.push_back(ids[static_cast<size_t>(pos)]);
            ids[static_cast<size_t>(pos)] = Vocabulary::kMask;
        }
        txt.push_back(state.encode_text_graph(ids, splits[i].sentence_boundaries));
        if (!plan.mask_positions[i].empty())
            mlm_rows.push_back(state.mlm_logits_graph(txt.back(), plan.mask_positions[i]));
    }

    std::vector<Tensor> img_globals, txt_globals, img_locals, txt_locals;
    for (size_t i = 0; i < n; ++i) {
        img_globals.push_back(img[i].global);
        txt_globals.push_back(txt[i].global);
        img_locals.push_back(img[i].local);
        txt_locals.push_back(txt[i].local);
    }

    BatchLossGraph out;
    out.global_contrastive = global_contrastive_loss_graph(img_globals, txt_globals, tau1);
    out.local_contrastive = local_contrastive_loss_graph(img_locals, txt_locals, tau2, tau3);

    // ITM: one positive sentence from the paired report, one sampled
    // negative from an unpaired report
    std::vector<Tensor> itm_logits;
    std::vector<int> itm_targets;
    auto sentence_tokens = [&](const SentenceSplit& s, int sentence) {
        const auto [b, e] = s.sentence_boundaries[static_cast<size_t>(sentence)];
        return std::vector<int>(s.token_ids.begin() + b, s.token_ids.begin() + e);
    };
    for (size_t i = 0; i < n; ++i) {
        itm_logits.push_back(
            state.itm_logits_graph(img[i].local, sentence_tokens(splits[i], plan.positive_sentence[i])));
        itm_targets.push_back(0);
    }
    for (const auto& neg : plan.negatives) {
        itm_logits.push_back(state.itm_logits_graph(
            img[static_cast<size_t>(neg.image_index)].local,
            sentence_tokens(splits[static_cast<size_t>(neg.report_index)], neg.sentence_index)));
        itm_targets.push_back(1);
    }
    out.itm = nn::cross_entropy_rows(nn::concat_rows(itm_logits), itm_targets);

    out.mlm = mlm_rows.empty()
                  ? nn::scalar_constant(0.0)
                  : nn::cross_entropy_rows(nn::concat_rows(mlm_rows), mlm_targets);

    out.total = nn::add(nn::add(out.global_contrastive, out.local_contrastive),
                        nn::add(out.itm, out.mlm));
    return out;
}

}  // namespace medalign
