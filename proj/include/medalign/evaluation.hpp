#pragma once

#include "medalign/dictionary.hpp"
#include "medalign/encoders.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace medalign {

struct BBox {
    int x0, y0, x1, y1;  // half-open pixel coordinates; x = column, y = row
};

struct GroundingAnnotation {
    std::string sample_id;
    std::string phrase;
    BBox bbox;
};

struct SaliencyMap {
    nn::Matrix values;  // H x W
};

// positive-template similarity minus negative-template similarity
double zero_shot_classify(const nn::Matrix& image, const std::string& disease,
                          const ClinicalDictionary& dict, const ModelState& state);
double zero_shot_classify(const ImageRepr& image_repr, const std::string& disease,
                          const ClinicalDictionary& dict, const ModelState& state);

// Mann-Whitney AUC via average ranks; ties count one half.
double compute_auc(const std::vector<double>& scores, const std::vector<bool>& labels);

// Cosine similarity of the phrase row against every non-class patch row,
// nearest-neighbor upsampled to the pixel grid.
SaliencyMap grounding_heatmap(const nn::Matrix& image, const std::string& phrase,
                              const ModelState& state);

// |mean_in - mean_out| / sqrt((var_in + var_out)/2 + eps), population
// variances, eps = 1e-8.
double compute_cnr(const SaliencyMap& map, const BBox& bbox);

// Binarize at the map's own quantile (v >= sorted[floor(q*n)]), then
// intersection-over-union against the box mask.
double compute_iou(const SaliencyMap& map, const BBox& bbox, double threshold_quantile = 0.9);

std::vector<GroundingAnnotation> load_grounding_annotations(const std::filesystem::path& path);

struct EvalResult {
    std::map<std::string, double> per_disease_auc;
    double mean_auc = 0.0;
    double mean_iou = 0.0;
    double mean_cnr = 0.0;
    int n_samples = 0;
    int n_annotations = 0;
    bool has_zeroshot = false;
    bool has_grounding = false;
};

EvalResult evaluate_zero_shot(const std::vector<CorpusSample>& samples,
                              const ClinicalDictionary& dict, const ModelState& state);

EvalResult evaluate_grounding(const std::vector<CorpusSample>& samples,
                              const std::vector<GroundingAnnotation>& annotations,
                              const ModelState& state, double iou_quantile = 0.9,
                              const std::filesystem::path& heatmap_dir = {});

std::string eval_result_to_json(const EvalResult& result, const std::string& extra_meta_json);

}  // namespace medalign
