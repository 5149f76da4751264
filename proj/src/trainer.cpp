#include "medalign/trainer.hpp"

#include "medalign/objectives.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <fstream>
#include <iostream>
#include <set>
#include <stdexcept>

namespace medalign {

using json = nlohmann::json;
using nn::Matrix;

namespace {

// rng substream tags
constexpr uint64_t kInitTag = 3000;
constexpr uint64_t kShuffleTag = 1000;
constexpr uint64_t kPlanTag = 2000;
constexpr uint64_t kRefineTag = 4000;

void require_keys(const json& j, const std::set<std::string>& allowed, const char* what) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (!allowed.count(it.key()))
            throw std::invalid_argument(std::string(what) + ": unknown key '" + it.key() + "'");
    }
}

ModelConfig model_config_from_json(const json& j) {
    require_keys(j,
                 {"image_height", "image_width", "patch_size", "d_model", "n_heads", "n_blocks",
                  "mlp_hidden", "embed_dim", "max_text_len", "itm_blocks"},
                 "model config");
    ModelConfig m;
    m.image_height = j.value("image_height", m.image_height);
    m.image_width = j.value("image_width", m.image_width);
    m.patch_size = j.value("patch_size", m.patch_size);
    m.d_model = j.value("d_model", m.d_model);
    m.n_heads = j.value("n_heads", m.n_heads);
    m.n_blocks = j.value("n_blocks", m.n_blocks);
    m.mlp_hidden = j.value("mlp_hidden", m.mlp_hidden);
    m.embed_dim = j.value("embed_dim", m.embed_dim);
    m.max_text_len = j.value("max_text_len", m.max_text_len);
    m.itm_blocks = j.value("itm_blocks", m.itm_blocks);
    return m;
}

}  // namespace

TrainConfig TrainConfig::from_json(const std::string& text) {
    json j = json::parse(text);
    require_keys(j,
                 {"iteration", "batch_size", "epochs", "learning_rate", "weight_decay",
                  "optimizer_betas", "mask_ratio", "temperatures", "refinement_ratio", "seed",
                  "itm_threshold", "supplement_policy", "allow_nonzero_mask_iter2", "model"},
                 "train config");
    TrainConfig c;
    c.iteration = j.at("iteration").get<int>();
    c.batch_size = j.at("batch_size").get<int>();
    c.epochs = j.at("epochs").get<int>();
    c.learning_rate = j.at("learning_rate").get<double>();
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    if (j.contains("optimizer_betas")) {
        const auto betas = j["optimizer_betas"].get<std::vector<double>>();
        if (betas.size() != 2) throw std::invalid_argument("train config: optimizer_betas needs 2 values");
        c.optimizer_betas = {betas[0], betas[1]};
    }
    c.mask_ratio = j.value("mask_ratio", c.iteration == 2 ? 0.0 : c.mask_ratio);
    if (j.contains("temperatures")) {
        const auto t = j["temperatures"].get<std::vector<double>>();
        if (t.size() != 3) throw std::invalid_argument("train config: temperatures needs 3 values");
        c.temperatures = {t[0], t[1], t[2]};
    }
    c.refinement_ratio = j.value("refinement_ratio", c.refinement_ratio);
    c.seed = j.value("seed", c.seed);
    c.itm_threshold = j.value("itm_threshold", c.itm_threshold);
    c.supplement_policy = j.value("supplement_policy", c.supplement_policy);
    c.allow_nonzero_mask_iter2 = j.value("allow_nonzero_mask_iter2", false);
    if (j.contains("model")) c.model = model_config_from_json(j["model"]);
    c.validate();
    return c;
}

TrainConfig TrainConfig::from_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("train config: cannot read " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return from_json(buf.str());
}

std::string TrainConfig::to_json() const {
    json j;
    j["iteration"] = iteration;
    j["batch_size"] = batch_size;
    j["epochs"] = epochs;
    j["learning_rate"] = learning_rate;
    j["weight_decay"] = weight_decay;
    j["optimizer_betas"] = {optimizer_betas[0], optimizer_betas[1]};
    j["mask_ratio"] = mask_ratio;
    j["temperatures"] = {temperatures[0], temperatures[1], temperatures[2]};
    j["refinement_ratio"] = refinement_ratio;
    j["seed"] = seed;
    j["itm_threshold"] = itm_threshold;
    j["supplement_policy"] = supplement_policy;
    j["allow_nonzero_mask_iter2"] = allow_nonzero_mask_iter2;
    return j.dump(2);
}

void TrainConfig::validate() const {
    if (iteration != 1 && iteration != 2)
        throw std::invalid_argument("train config: iteration must be 1 or 2");
    if (batch_size < 1 || epochs < 1)
        throw std::invalid_argument("train config: batch_size and epochs must be positive");
    if (learning_rate <= 0.0) throw std::invalid_argument("train config: learning_rate must be positive");
    if (weight_decay < 0.0) throw std::invalid_argument("train config: weight_decay must be >= 0");
    for (double b : optimizer_betas) {
        if (b <= 0.0 || b >= 1.0) throw std::invalid_argument("train config: betas must be in (0,1)");
    }
    if (mask_ratio < 0.0 || mask_ratio >= 1.0)
        throw std::invalid_argument("train config: mask_ratio must be in [0,1)");
    for (double t : temperatures) {
        if (t <= 0.0) throw std::invalid_argument("train config: temperatures must be positive");
    }
    if (refinement_ratio < 0.0 || refinement_ratio > 1.0)
        throw std::invalid_argument("train config: refinement_ratio must be in [0,1]");
    if (itm_threshold < 0.0 || itm_threshold > 1.0)
        throw std::invalid_argument("train config: itm_threshold must be in [0,1]");
    supplement_policy_from_string(supplement_policy);
    if (iteration == 2 && mask_ratio > 0.0 && !allow_nonzero_mask_iter2)
        throw std::invalid_argument(
            "train config: iteration 2 requires mask_ratio = 0 (set allow_nonzero_mask_iter2 to override)");
}

namespace {

struct OptimizerSnapshot {
    std::vector<std::pair<std::string, Matrix>> arrays;
};

OptimizerSnapshot snapshot_optimizer(nn::AdamW& opt) {
    OptimizerSnapshot snap;
    for (size_t i = 0; i < opt.params().size(); ++i) {
        snap.arrays.emplace_back("optim.m." + opt.params()[i].first, opt.first_moment(i));
        snap.arrays.emplace_back("optim.v." + opt.params()[i].first, opt.second_moment(i));
    }
    return snap;
}

void restore_optimizer(nn::AdamW& opt, const std::map<std::string, Matrix>& arrays,
                       int64_t steps) {
    for (size_t i = 0; i < opt.params().size(); ++i) {
        const std::string& name = opt.params()[i].first;
        auto m = arrays.find("optim.m." + name);
        auto v = arrays.find("optim.v." + name);
        if (m == arrays.end() || v == arrays.end())
            throw std::runtime_error("resume: checkpoint carries no optimizer state for '" + name + "'");
        opt.first_moment(i) = m->second;
        opt.second_moment(i) = v->second;
    }
    opt.set_steps_taken(steps);
}

std::vector<SentenceSplit> tokenize_corpus(const std::vector<CorpusSample>& corpus,
                                           const Vocabulary& vocab) {
    std::vector<SentenceSplit> splits;
    splits.reserve(corpus.size());
    for (const auto& s : corpus) splits.push_back(tokenize(split_sentences(s.report), vocab));
    return splits;
}

TrainOutput run_training(ModelState& state, nn::AdamW& opt,
                         const std::vector<CorpusSample>& corpus,
                         const std::vector<SentenceSplit>& splits, const TrainConfig& config,
                         const std::filesystem::path& out_dir, int start_epoch) {
    std::filesystem::create_directories(out_dir);
    const auto run_path = out_dir / "run.jsonl";
    std::ofstream run_log(run_path, start_epoch == 0 ? std::ios::trunc : std::ios::app);
    if (!run_log) throw std::runtime_error("trainer: cannot write " + run_path.string());

    TrainOutput out;
    const size_t n = corpus.size();
    for (int epoch = start_epoch; epoch < config.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        std::vector<size_t> order(n);
        for (size_t i = 0; i < n; ++i) order[i] = i;
        Rng shuffle_rng(mix_seed(config.seed, kShuffleTag, static_cast<uint64_t>(epoch)));
        shuffle_rng.shuffle(order);

        EpochRecord rec;
        rec.epoch = epoch + 1;
        int batches = 0;
        for (size_t begin = 0, batch_id = 0; begin < n; begin += config.batch_size, ++batch_id) {
            const size_t end = std::min(n, begin + static_cast<size_t>(config.batch_size));
            std::vector<Matrix> images;
            std::vector<SentenceSplit> batch_splits;
            for (size_t k = begin; k < end; ++k) {
                images.push_back(corpus[order[k]].image);
                batch_splits.push_back(splits[order[k]]);
            }
            Rng plan_rng(mix_seed(config.seed, kPlanTag + static_cast<uint64_t>(epoch),
                                  static_cast<uint64_t>(batch_id)));
            const BatchPlan plan = make_batch_plan(batch_splits, config.mask_ratio, plan_rng);
            BatchLossGraph loss =
                batch_total_loss(images, batch_splits, plan, state, config.temperatures[0],
                                 config.temperatures[1], config.temperatures[2]);
            if (!std::isfinite(loss.total.scalar()))
                throw std::runtime_error("trainer: non-finite loss at epoch " +
                                         std::to_string(epoch + 1) + " batch " +
                                         std::to_string(batch_id));
            nn::backward(loss.total);
            opt.step();
            opt.zero_grad();
            state.assert_finite("after step " + std::to_string(opt.steps_taken()));

            rec.global_contrastive += loss.global_contrastive.scalar();
            rec.local_contrastive += loss.local_contrastive.scalar();
            rec.itm += loss.itm.scalar();
            rec.mlm += loss.mlm.scalar();
            rec.total += loss.total.scalar();
            ++batches;
        }
        rec.global_contrastive /= batches;
        rec.local_contrastive /= batches;
        rec.itm /= batches;
        rec.mlm /= batches;
        rec.total /= batches;
        rec.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

        const std::string ckpt_name = "checkpoint_epoch" + std::to_string(epoch + 1) + ".bin";
        rec.checkpoint = ckpt_name;
        json extra;
        extra["epochs_completed"] = epoch + 1;
        extra["adam_steps"] = opt.steps_taken();
        extra["iteration"] = config.iteration;
        const auto snap = snapshot_optimizer(opt);
        state.save_checkpoint(out_dir / ckpt_name, snap.arrays, extra.dump());

        json line;
        line["epoch"] = rec.epoch;
        line["global_contrastive"] = rec.global_contrastive;
        line["local_contrastive"] = rec.local_contrastive;
        line["itm"] = rec.itm;
        line["mlm"] = rec.mlm;
        line["total"] = rec.total;
        line["wall_seconds"] = rec.wall_seconds;
        line["config_fingerprint"] = state.fingerprint();
        line["checkpoint"] = ckpt_name;
        run_log << line.dump() << "\n";
        run_log.flush();
        out.records.push_back(std::move(rec));
    }

    json extra;
    extra["epochs_completed"] = config.epochs;
    extra["adam_steps"] = opt.steps_taken();
    extra["iteration"] = config.iteration;
    const auto snap = snapshot_optimizer(opt);
    state.save_checkpoint(out_dir / "checkpoint.bin", snap.arrays, extra.dump());
    out.checkpoint = out_dir / "checkpoint.bin";
    return out;
}

int resume_start_epoch(const std::string& extra_meta_json, int expected_iteration) {
    json extra = json::parse(extra_meta_json);
    if (extra.value("iteration", 0) != expected_iteration)
        throw std::runtime_error("resume: checkpoint belongs to a different iteration");
    return extra.at("epochs_completed").get<int>();
}

}  // namespace

TrainOutput train_iteration1(const std::vector<CorpusSample>& corpus, const TrainConfig& config,
                             const std::filesystem::path& out_dir,
                             const std::optional<std::filesystem::path>& resume) {
    config.validate();
    if (config.iteration != 1)
        throw std::invalid_argument("train_iteration1: config.iteration must be 1");
    if (corpus.empty()) throw std::invalid_argument("train_iteration1: empty corpus");
    if (config.iteration == 2 && config.mask_ratio > 0.0 && config.allow_nonzero_mask_iter2)
        std::cerr << "warning: nonzero mask ratio in iteration 2\n";

    std::filesystem::create_directories(out_dir);
    const Vocabulary vocab = Vocabulary::build(corpus, 1);
    vocab.save(out_dir / "vocab.tsv");

    ModelConfig mc = config.model;
    mc.image_height = static_cast<int>(corpus.front().image.rows());
    mc.image_width = static_cast<int>(corpus.front().image.cols());
    mc.tau1 = config.temperatures[0];
    mc.tau2 = config.temperatures[1];
    mc.tau3 = config.temperatures[2];
    mc.init_seed = mix_seed(config.seed, kInitTag);

    std::unique_ptr<ModelState> state;
    int start_epoch = 0;
    std::map<std::string, Matrix> extra_arrays;
    int64_t adam_steps = 0;
    if (resume) {
        auto loaded = ModelState::load_checkpoint(*resume, vocab);
        start_epoch = resume_start_epoch(loaded.extra_meta_json, 1);
        adam_steps = json::parse(loaded.extra_meta_json).at("adam_steps").get<int64_t>();
        extra_arrays = std::move(loaded.extra_arrays);
        state = std::move(loaded.state);
    } else {
        state = std::make_unique<ModelState>(mc, vocab);
    }

    const auto splits = tokenize_corpus(corpus, vocab);
    nn::AdamW opt(state->parameters(), config.learning_rate, config.optimizer_betas[0],
                  config.optimizer_betas[1], config.weight_decay);
    if (resume) restore_optimizer(opt, extra_arrays, adam_steps);

    TrainOutput out = run_training(*state, opt, corpus, splits, config, out_dir, start_epoch);
    out.vocab = out_dir / "vocab.tsv";
    return out;
}

TrainOutput train_iteration2(const std::filesystem::path& checkpoint_path,
                             const std::filesystem::path& vocab_path,
                             const std::vector<CorpusSample>& refined_corpus,
                             const TrainConfig& config, const std::filesystem::path& out_dir,
                             const std::optional<std::filesystem::path>& resume) {
    config.validate();
    if (config.iteration != 2)
        throw std::invalid_argument("train_iteration2: config.iteration must be 2");
    if (refined_corpus.empty()) throw std::invalid_argument("train_iteration2: empty corpus");
    if (config.mask_ratio > 0.0)
        std::cerr << "warning: nonzero mask ratio in iteration 2\n";

    std::filesystem::create_directories(out_dir);
    const Vocabulary vocab = Vocabulary::load(vocab_path);

    std::unique_ptr<ModelState> state;
    int start_epoch = 0;
    std::map<std::string, Matrix> extra_arrays;
    int64_t adam_steps = 0;
    if (resume) {
        auto loaded = ModelState::load_checkpoint(*resume, vocab);
        start_epoch = resume_start_epoch(loaded.extra_meta_json, 2);
        adam_steps = json::parse(loaded.extra_meta_json).at("adam_steps").get<int64_t>();
        extra_arrays = std::move(loaded.extra_arrays);
        state = std::move(loaded.state);
    } else {
        auto loaded = ModelState::load_checkpoint(checkpoint_path, vocab);
        state = std::move(loaded.state);  // fresh optimizer for the fine-tune
    }

    const auto splits = tokenize_corpus(refined_corpus, vocab);
    nn::AdamW opt(state->parameters(), config.learning_rate, config.optimizer_betas[0],
                  config.optimizer_betas[1], config.weight_decay);
    if (resume) restore_optimizer(opt, extra_arrays, adam_steps);

    TrainOutput out = run_training(*state, opt, refined_corpus, splits, config, out_dir, start_epoch);
    out.vocab = vocab_path;
    return out;
}

void refine_corpus(const std::vector<CorpusSample>& corpus, const ModelState& state,
                   const ClinicalDictionary& dict, double refinement_ratio,
                   const RefineConfig& refine_config, uint64_t seed,
                   const std::filesystem::path& out_path) {
    if (refinement_ratio < 0.0 || refinement_ratio > 1.0)
        throw std::invalid_argument("refine_corpus: ratio must be in [0,1]");
    const size_t n = corpus.size();
    const size_t k = static_cast<size_t>(std::floor(refinement_ratio * static_cast<double>(n)));

    std::vector<size_t> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(mix_seed(seed, kRefineTag));
    rng.shuffle(order);
    std::set<size_t> selected(order.begin(), order.begin() + static_cast<long>(k));

    std::ofstream out(out_path, std::ios::binary);
    if (!out) throw std::runtime_error("refine_corpus: cannot write " + out_path.string());
    for (size_t i = 0; i < n; ++i) {
        const CorpusSample& s = corpus[i];
        if (selected.count(i)) {
            const RefinedReport rr =
                refine_report(s.image, s.report, dict, state, refine_config);
            out << refined_report_to_json(rr, s.sample_id, true) << "\n";
        } else {
            json j;
            j["sample_id"] = s.sample_id;
            j["refined"] = false;
            j["refined_text"] = s.report;
            j["sentences"] = json::array();
            j["global_negatives"] = json::array();
            out << j.dump() << "\n";
        }
    }
}

int apply_refined_reports(std::vector<CorpusSample>& samples,
                          const std::filesystem::path& refined_jsonl) {
    std::ifstream in(refined_jsonl);
    if (!in) throw std::runtime_error("refined corpus: cannot read " + refined_jsonl.string());
    std::map<std::string, std::pair<std::string, bool>> by_id;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        by_id[j.at("sample_id").get<std::string>()] = {j.at("refined_text").get<std::string>(),
                                                       j.at("refined").get<bool>()};
    }
    int refined_count = 0;
    for (auto& s : samples) {
        auto it = by_id.find(s.sample_id);
        if (it == by_id.end())
            throw std::runtime_error("refined corpus: no record for sample " + s.sample_id);
        s.report = it->second.first;
        if (it->second.second) ++refined_count;
    }
    return refined_count;
}

}  // namespace medalign
