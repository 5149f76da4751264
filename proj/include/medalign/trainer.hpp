#pragma once

#include "medalign/corpus.hpp"
#include "medalign/dictionary.hpp"
#include "medalign/encoders.hpp"
#include "medalign/refinement.hpp"

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace medalign {

struct TrainConfig {
    int iteration = 1;
    int batch_size = 16;
    int epochs = 5;
    double learning_rate = 1e-3;
    double weight_decay = 0.05;
    std::array<double, 2> optimizer_betas = {0.9, 0.95};
    double mask_ratio = 0.15;
    std::array<double, 3> temperatures = {0.07, 0.07, 0.1};
    double refinement_ratio = 1.0;  // iteration 2 only
    uint64_t seed = 7;
    double itm_threshold = 0.5;
    std::string supplement_policy = "manual_template";
    bool allow_nonzero_mask_iter2 = false;
    ModelConfig model;  // desk-scale defaults; overridable via the "model" object

    static TrainConfig from_json_file(const std::filesystem::path& path);
    static TrainConfig from_json(const std::string& text);
    std::string to_json() const;
    void validate() const;
};

struct EpochRecord {
    int epoch = 0;  // 1-based
    double global_contrastive = 0.0;
    double local_contrastive = 0.0;
    double itm = 0.0;
    double mlm = 0.0;
    double total = 0.0;
    double wall_seconds = 0.0;
    std::string checkpoint;
};

struct TrainOutput {
    std::filesystem::path checkpoint;  // final
    std::filesystem::path vocab;
    std::vector<EpochRecord> records;
};

// Trains from scratch on raw reports; writes vocab.tsv, per-epoch
// checkpoints, checkpoint.bin and run.jsonl under out_dir.
TrainOutput train_iteration1(const std::vector<CorpusSample>& corpus, const TrainConfig& config,
                             const std::filesystem::path& out_dir,
                             const std::optional<std::filesystem::path>& resume = std::nullopt);

// Fine-tunes from an iteration-1 checkpoint on the given (already refined)
// reports with a fresh optimizer.
TrainOutput train_iteration2(const std::filesystem::path& checkpoint_path,
                             const std::filesystem::path& vocab_path,
                             const std::vector<CorpusSample>& refined_corpus,
                             const TrainConfig& config, const std::filesystem::path& out_dir,
                             const std::optional<std::filesystem::path>& resume = std::nullopt);

// Applies refine_report to the first floor(ratio * n) samples of a seeded
// shuffle; the rest pass through with their raw text. Writes refined.jsonl.
void refine_corpus(const std::vector<CorpusSample>& corpus, const ModelState& state,
                   const ClinicalDictionary& dict, double refinement_ratio,
                   const RefineConfig& refine_config, uint64_t seed,
                   const std::filesystem::path& out_path);

// Replaces each sample's report with the refined_text recorded in
// refined.jsonl. Returns the number of samples carrying refinement
// provenance.
int apply_refined_reports(std::vector<CorpusSample>& samples,
                          const std::filesystem::path& refined_jsonl);

}  // namespace medalign
