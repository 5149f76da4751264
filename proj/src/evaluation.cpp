#include "medalign/evaluation.hpp"

#include "medalign/refinement.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace medalign {

using json = nlohmann::json;
using nn::Matrix;

namespace {

void check_bbox(const BBox& b, Eigen::Index h, Eigen::Index w) {
    if (!(0 <= b.x0 && b.x0 < b.x1 && b.x1 <= w && 0 <= b.y0 && b.y0 < b.y1 && b.y1 <= h))
        throw std::invalid_argument("bbox out of range");
}

bool inside(const BBox& b, Eigen::Index y, Eigen::Index x) {
    return x >= b.x0 && x < b.x1 && y >= b.y0 && y < b.y1;
}

}  // namespace

double zero_shot_classify(const ImageRepr& image_repr, const std::string& disease,
                          const ClinicalDictionary& dict, const ModelState& state) {
    const DiseaseEntry& e = dict.entry(disease);  // throws for unknown diseases
    const double pos = score_sentence_repr(image_repr, e.positives.front(), state);
    const double neg = score_sentence_repr(image_repr, e.negatives.front(), state);
    return pos - neg;
}

double zero_shot_classify(const Matrix& image, const std::string& disease,
                          const ClinicalDictionary& dict, const ModelState& state) {
    return zero_shot_classify(encode_image(image, state), disease, dict, state);
}

double compute_auc(const std::vector<double>& scores, const std::vector<bool>& labels) {
    if (scores.size() != labels.size())
        throw std::invalid_argument("compute_auc: score/label count mismatch");
    size_t n_pos = 0, n_neg = 0;
    for (bool l : labels) (l ? n_pos : n_neg)++;
    if (n_pos == 0 || n_neg == 0)
        throw std::invalid_argument("compute_auc: need at least one positive and one negative");

    // average ranks over tie runs, then the Mann-Whitney statistic
    std::vector<size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return scores[a] < scores[b]; });
    std::vector<double> rank(scores.size());
    size_t i = 0;
    while (i < idx.size()) {
        size_t j = i;
        while (j + 1 < idx.size() && scores[idx[j + 1]] == scores[idx[i]]) ++j;
        const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (size_t k = i; k <= j; ++k) rank[idx[k]] = avg;
        i = j + 1;
    }
    double pos_rank_sum = 0.0;
    for (size_t k = 0; k < scores.size(); ++k) {
        if (labels[k]) pos_rank_sum += rank[k];
    }
    const double np = static_cast<double>(n_pos), nn_ = static_cast<double>(n_neg);
    return (pos_rank_sum - np * (np + 1.0) / 2.0) / (np * nn_);
}

SaliencyMap grounding_heatmap(const Matrix& image, const std::string& phrase,
                              const ModelState& state) {
    if (phrase.empty()) throw std::invalid_argument("grounding_heatmap: empty phrase");
    const ImageRepr repr = encode_image(image, state);
    const TextRepr text = encode_text(tokenize({phrase}, state.vocab()), state, 0.0).first;

    const ModelConfig& cfg = state.config();
    const int p = cfg.patch_size, px = cfg.patches_x(), py = cfg.patches_y();
    SaliencyMap map;
    map.values.resize(image.rows(), image.cols());
    // local rows are unit vectors, so the dot product is the cosine
    for (int gy = 0; gy < py; ++gy) {
        for (int gx = 0; gx < px; ++gx) {
            const double sim = repr.local.row(1 + gy * px + gx).dot(text.local.row(0));
            for (int dy = 0; dy < p; ++dy)
                for (int dx = 0; dx < p; ++dx) map.values(gy * p + dy, gx * p + dx) = sim;
        }
    }
    return map;
}

double compute_cnr(const SaliencyMap& map, const BBox& bbox) {
    const Eigen::Index h = map.values.rows(), w = map.values.cols();
    check_bbox(bbox, h, w);
    if (bbox.x0 == 0 && bbox.y0 == 0 && bbox.x1 == w && bbox.y1 == h)
        throw std::invalid_argument("compute_cnr: bbox covers the whole image");

    double sum_in = 0.0, sum2_in = 0.0, sum_out = 0.0, sum2_out = 0.0;
    double n_in = 0.0, n_out = 0.0;
    for (Eigen::Index y = 0; y < h; ++y) {
        for (Eigen::Index x = 0; x < w; ++x) {
            const double v = map.values(y, x);
            if (inside(bbox, y, x)) {
                sum_in += v;
                sum2_in += v * v;
                n_in += 1.0;
            } else {
                sum_out += v;
                sum2_out += v * v;
                n_out += 1.0;
            }
        }
    }
    const double mu_in = sum_in / n_in, mu_out = sum_out / n_out;
    const double var_in = sum2_in / n_in - mu_in * mu_in;
    const double var_out = sum2_out / n_out - mu_out * mu_out;
    const double eps = 1e-8;
    return std::fabs(mu_in - mu_out) / std::sqrt(std::max(0.0, (var_in + var_out) / 2.0) + eps);
}

double compute_iou(const SaliencyMap& map, const BBox& bbox, double threshold_quantile) {
    if (threshold_quantile <= 0.0 || threshold_quantile >= 1.0)
        throw std::invalid_argument("compute_iou: quantile must be in (0, 1)");
    const Eigen::Index h = map.values.rows(), w = map.values.cols();
    check_bbox(bbox, h, w);

    std::vector<double> sorted(map.values.data(), map.values.data() + map.values.size());
    std::sort(sorted.begin(), sorted.end());
    const size_t n = sorted.size();
    size_t k = static_cast<size_t>(std::floor(threshold_quantile * static_cast<double>(n)));
    if (k >= n) k = n - 1;
    const double threshold = sorted[k];

    double inter = 0.0, uni = 0.0;
    for (Eigen::Index y = 0; y < h; ++y) {
        for (Eigen::Index x = 0; x < w; ++x) {
            const bool in_mask = map.values(y, x) >= threshold;
            const bool in_box = inside(bbox, y, x);
            if (in_mask && in_box) inter += 1.0;
            if (in_mask || in_box) uni += 1.0;
        }
    }
    return uni == 0.0 ? 0.0 : inter / uni;
}

std::vector<GroundingAnnotation> load_grounding_annotations(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("grounding: cannot read " + path.string());
    std::vector<GroundingAnnotation> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        GroundingAnnotation a;
        a.sample_id = j.at("sample_id").get<std::string>();
        a.phrase = j.at("phrase").get<std::string>();
        const auto box = j.at("bbox").get<std::vector<int>>();
        if (box.size() != 4) throw std::runtime_error("grounding: bbox must have 4 entries");
        a.bbox = {box[0], box[1], box[2], box[3]};
        out.push_back(std::move(a));
    }
    return out;
}

EvalResult evaluate_zero_shot(const std::vector<CorpusSample>& samples,
                              const ClinicalDictionary& dict, const ModelState& state) {
    if (samples.empty()) throw std::invalid_argument("evaluate_zero_shot: no samples");
    std::vector<std::string> diseases;
    for (const auto& s : samples) {
        for (const auto& [d, present] : s.labels) {
            if (std::find(diseases.begin(), diseases.end(), d) == diseases.end())
                diseases.push_back(d);
        }
    }
    std::sort(diseases.begin(), diseases.end());
    if (diseases.empty())
        throw std::invalid_argument("evaluate_zero_shot: corpus has no labels");

    std::vector<ImageRepr> reprs;
    reprs.reserve(samples.size());
    for (const auto& s : samples) reprs.push_back(encode_image(s.image, state));

    EvalResult result;
    result.has_zeroshot = true;
    result.n_samples = static_cast<int>(samples.size());
    double total = 0.0;
    for (const auto& d : diseases) {
        std::vector<double> scores;
        std::vector<bool> labels;
        for (size_t i = 0; i < samples.size(); ++i) {
            auto it = samples[i].labels.find(d);
            if (it == samples[i].labels.end()) continue;
            scores.push_back(zero_shot_classify(reprs[i], d, dict, state));
            labels.push_back(it->second);
        }
        const double auc = compute_auc(scores, labels);
        result.per_disease_auc[d] = auc;
        total += auc;
    }
    result.mean_auc = total / static_cast<double>(diseases.size());
    return result;
}

EvalResult evaluate_grounding(const std::vector<CorpusSample>& samples,
                              const std::vector<GroundingAnnotation>& annotations,
                              const ModelState& state, double iou_quantile,
                              const std::filesystem::path& heatmap_dir) {
    if (annotations.empty()) throw std::invalid_argument("evaluate_grounding: no annotations");
    std::map<std::string, const CorpusSample*> by_id;
    for (const auto& s : samples) by_id[s.sample_id] = &s;

    if (!heatmap_dir.empty()) std::filesystem::create_directories(heatmap_dir);

    EvalResult result;
    result.has_grounding = true;
    result.n_samples = static_cast<int>(samples.size());
    double iou_sum = 0.0, cnr_sum = 0.0;
    int count = 0;
    for (const auto& a : annotations) {
        auto it = by_id.find(a.sample_id);
        if (it == by_id.end())
            throw std::runtime_error("evaluate_grounding: unknown sample_id " + a.sample_id);
        const SaliencyMap map = grounding_heatmap(it->second->image, a.phrase, state);
        iou_sum += compute_iou(map, a.bbox, iou_quantile);
        cnr_sum += compute_cnr(map, a.bbox);
        if (!heatmap_dir.empty()) {
            save_image_f32(map.values,
                           heatmap_dir / (a.sample_id + "_" + std::to_string(count) + ".f32"));
        }
        ++count;
    }
    result.n_annotations = count;
    result.mean_iou = iou_sum / count;
    result.mean_cnr = cnr_sum / count;
    return result;
}

std::string eval_result_to_json(const EvalResult& result, const std::string& extra_meta_json) {
    json j;
    if (result.has_zeroshot) {
        j["per_disease_auc"] = result.per_disease_auc;
        j["mean_auc"] = result.mean_auc;
    }
    if (result.has_grounding) {
        j["mean_iou"] = result.mean_iou;
        j["mean_cnr"] = result.mean_cnr;
        j["n_annotations"] = result.n_annotations;
    }
    j["n_samples"] = result.n_samples;
    j["meta"] = json::parse(extra_meta_json);
    return j.dump(2);
}

}  // namespace medalign
