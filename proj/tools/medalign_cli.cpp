// medalign: synthetic corpus generation, dictionary management,
// two-iteration contrastive training, report refinement and zero-shot
// evaluation from one binary.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "medalign/corpus.hpp"
#include "medalign/dictionary.hpp"
#include "medalign/evaluation.hpp"
#include "medalign/objectives.hpp"
#include "medalign/refinement.hpp"
#include "medalign/trainer.hpp"

#include <fstream>
#include <iostream>

using namespace medalign;
using json = nlohmann::json;

namespace {

// Exit codes: 0 success, 1 usage/missing-artifact, 2 runtime failure.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void require_file(const std::filesystem::path& p, const char* what) {
    if (!std::filesystem::exists(p))
        throw UsageError(std::string(what) + " not found: " + p.string());
}

void require_dir(const std::filesystem::path& p, const char* what) {
    if (!std::filesystem::is_directory(p))
        throw UsageError(std::string(what) + " not found: " + p.string());
}

TrainConfig load_config(const std::string& path, int expected_iteration) {
    require_file(path, "config");
    TrainConfig config;
    try {
        config = TrainConfig::from_json_file(path);
    } catch (const std::exception& e) {
        throw UsageError(std::string("invalid config: ") + e.what());
    }
    if (config.iteration != expected_iteration)
        throw UsageError("config iteration " + std::to_string(config.iteration) +
                         " does not match this command (expected " +
                         std::to_string(expected_iteration) + ")");
    return config;
}

int guarded(const std::function<void()>& body) {
    try {
        body();
        return 0;
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"iterative vision-language pretraining with dictionary-driven report refinement"};
    app.require_subcommand(1);

    // --- gen ---
    auto* gen = app.add_subcommand("gen", "generate a synthetic corpus directory");
    std::string gen_spec, gen_out;
    gen->add_option("--spec", gen_spec, "synthetic spec JSON")->required();
    gen->add_option("--out", gen_out, "output corpus directory")->required();

    // --- dict ---
    auto* dict_cmd = app.add_subcommand("dict", "build or augment the clinical dictionary");
    std::string dict_mode = "manual", dict_out, dict_fixtures, dict_endpoint, dict_model;
    std::string dict_api_env = "MEDALIGN_API_KEY", dict_base;
    int dict_n = 5;
    dict_cmd->add_option("--mode", dict_mode, "manual | llm")->required();
    dict_cmd->add_option("--out", dict_out, "output dictionary JSON")->required();
    dict_cmd->add_option("--fixtures", dict_fixtures, "recorded-responses directory (offline mode)");
    dict_cmd->add_option("--endpoint", dict_endpoint, "LLM endpoint URL");
    dict_cmd->add_option("--model", dict_model, "LLM model name");
    dict_cmd->add_option("--api-key-env", dict_api_env, "environment variable holding the API key");
    dict_cmd->add_option("--n", dict_n, "generated sentences per disease (default 5)");
    dict_cmd->add_option("--base", dict_base, "base dictionary to augment (default: built-in manual)");

    // --- pretrain ---
    auto* pretrain = app.add_subcommand("pretrain", "iteration-1 training on raw reports");
    std::string pre_config, pre_corpus, pre_out, pre_resume;
    pretrain->add_option("--config", pre_config, "train config JSON (iteration 1)")->required();
    pretrain->add_option("--corpus", pre_corpus, "corpus directory")->required();
    pretrain->add_option("--out", pre_out, "run output directory")->required();
    pretrain->add_option("--resume", pre_resume, "epoch checkpoint to resume from");

    // --- refine ---
    auto* refine = app.add_subcommand("refine", "refine reports with a trained checkpoint");
    std::string ref_config, ref_corpus, ref_ckpt, ref_vocab, ref_dict, ref_out;
    double ref_ratio = -1.0;
    refine->add_option("--config", ref_config, "train config JSON (iteration 2)")->required();
    refine->add_option("--corpus", ref_corpus, "corpus directory")->required();
    refine->add_option("--checkpoint", ref_ckpt, "iteration-1 checkpoint")->required();
    refine->add_option("--vocab", ref_vocab, "vocabulary file")->required();
    refine->add_option("--dict", ref_dict, "dictionary JSON")->required();
    refine->add_option("--out", ref_out, "output refined.jsonl")->required();
    refine->add_option("--ratio", ref_ratio, "override the config refinement_ratio");

    // --- finetune ---
    auto* finetune = app.add_subcommand("finetune", "iteration-2 training on refined reports");
    std::string fin_config, fin_corpus, fin_refined, fin_ckpt, fin_vocab, fin_out, fin_resume;
    finetune->add_option("--config", fin_config, "train config JSON (iteration 2)")->required();
    finetune->add_option("--corpus", fin_corpus, "corpus directory")->required();
    finetune->add_option("--refined", fin_refined, "refined.jsonl from the refine step")->required();
    finetune->add_option("--checkpoint", fin_ckpt, "iteration-1 checkpoint")->required();
    finetune->add_option("--vocab", fin_vocab, "vocabulary file")->required();
    finetune->add_option("--out", fin_out, "run output directory")->required();
    finetune->add_option("--resume", fin_resume, "epoch checkpoint to resume from");

    // --- eval ---
    auto* eval_cmd = app.add_subcommand("eval", "zero-shot classification / phrase grounding");
    std::string ev_ckpt, ev_vocab, ev_dict, ev_corpus, ev_out, ev_heatmaps;
    bool ev_zeroshot = false, ev_grounding = false;
    double ev_quantile = 0.9;
    eval_cmd->add_option("--checkpoint", ev_ckpt, "trained checkpoint")->required();
    eval_cmd->add_option("--vocab", ev_vocab, "vocabulary file")->required();
    eval_cmd->add_option("--dict", ev_dict, "dictionary JSON");
    eval_cmd->add_option("--corpus", ev_corpus, "corpus directory to evaluate")->required();
    eval_cmd->add_option("--out", ev_out, "output eval.json")->required();
    eval_cmd->add_flag("--zeroshot", ev_zeroshot, "run zero-shot disease classification");
    eval_cmd->add_flag("--grounding", ev_grounding, "run phrase grounding (IoU, CNR)");
    eval_cmd->add_option("--heatmap-dir", ev_heatmaps, "dump saliency maps to this directory");
    eval_cmd->add_option("--iou-quantile", ev_quantile, "saliency binarization quantile (default 0.9)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    if (gen->parsed()) {
        return guarded([&] {
            require_file(gen_spec, "spec");
            SyntheticSpec spec;
            try {
                spec = SyntheticSpec::from_json_file(gen_spec);
            } catch (const std::exception& e) {
                throw UsageError(std::string("invalid spec: ") + e.what());
            }
            const auto samples = gen_synthetic(spec);
            save_corpus_dir(samples, gen_out);
            std::cout << "wrote " << samples.size() << " samples to " << gen_out << "\n";
        });
    }

    if (dict_cmd->parsed()) {
        return guarded([&] {
            if (dict_mode != "manual" && dict_mode != "llm")
                throw UsageError("--mode must be manual or llm");
            ClinicalDictionary dict =
                dict_base.empty() ? build_manual_dictionary() : load_dictionary(dict_base);
            if (dict_mode == "llm") {
                std::unique_ptr<LlmClient> client;
                if (!dict_fixtures.empty()) {
                    require_dir(dict_fixtures, "fixtures directory");
                    client = std::make_unique<FixtureLlmClient>(dict_fixtures);
                } else if (!dict_endpoint.empty() && !dict_model.empty()) {
                    client = std::make_unique<HttpLlmClient>(dict_endpoint, dict_model, dict_api_env);
                } else {
                    throw UsageError("llm mode needs --fixtures or both --endpoint and --model");
                }
                dict = augment_with_llm(dict, *client, dict_n);
            }
            save_dictionary(dict, dict_out);
            std::cout << "wrote " << dict.entries.size() << "-entry dictionary to " << dict_out << "\n";
        });
    }

    if (pretrain->parsed()) {
        return guarded([&] {
            const TrainConfig config = load_config(pre_config, 1);
            require_dir(pre_corpus, "corpus");
            require_file(std::filesystem::path(pre_corpus) / "samples.jsonl", "corpus samples.jsonl");
            std::optional<std::filesystem::path> resume;
            if (!pre_resume.empty()) {
                require_file(pre_resume, "resume checkpoint");
                resume = pre_resume;
            }
            const auto corpus = load_corpus_dir(pre_corpus);
            const TrainOutput out = train_iteration1(corpus, config, pre_out, resume);
            std::cout << "final checkpoint: " << out.checkpoint.string() << "\n";
        });
    }

    if (refine->parsed()) {
        return guarded([&] {
            const TrainConfig config = load_config(ref_config, 2);
            require_dir(ref_corpus, "corpus");
            require_file(ref_ckpt, "iteration-1 checkpoint");
            require_file(ref_vocab, "vocabulary");
            require_file(ref_dict, "dictionary");
            const auto corpus = load_corpus_dir(ref_corpus);
            const Vocabulary vocab = Vocabulary::load(ref_vocab);
            auto loaded = ModelState::load_checkpoint(ref_ckpt, vocab);
            const ClinicalDictionary dict = load_dictionary(ref_dict);
            const double ratio = ref_ratio >= 0.0 ? ref_ratio : config.refinement_ratio;
            RefineConfig rc;
            rc.itm_threshold = config.itm_threshold;
            rc.policy = supplement_policy_from_string(config.supplement_policy);
            refine_corpus(corpus, *loaded.state, dict, ratio, rc, config.seed, ref_out);
            std::cout << "wrote refined corpus to " << ref_out << "\n";
        });
    }

    if (finetune->parsed()) {
        return guarded([&] {
            const TrainConfig config = load_config(fin_config, 2);
            require_dir(fin_corpus, "corpus");
            require_file(fin_refined, "refined corpus");
            require_file(fin_ckpt, "iteration-1 checkpoint");
            require_file(fin_vocab, "vocabulary");
            std::optional<std::filesystem::path> resume;
            if (!fin_resume.empty()) {
                require_file(fin_resume, "resume checkpoint");
                resume = fin_resume;
            }
            auto corpus = load_corpus_dir(fin_corpus);
            apply_refined_reports(corpus, fin_refined);
            const TrainOutput out =
                train_iteration2(fin_ckpt, fin_vocab, corpus, config, fin_out, resume);
            std::cout << "final checkpoint: " << out.checkpoint.string() << "\n";
        });
    }

    if (eval_cmd->parsed()) {
        return guarded([&] {
            if (!ev_zeroshot && !ev_grounding)
                throw UsageError("eval needs --zeroshot and/or --grounding");
            require_file(ev_ckpt, "checkpoint");
            require_file(ev_vocab, "vocabulary");
            require_dir(ev_corpus, "corpus");
            if (ev_zeroshot && ev_dict.empty())
                throw UsageError("--zeroshot needs --dict");
            if (!ev_dict.empty()) require_file(ev_dict, "dictionary");
            const auto grounding_path = std::filesystem::path(ev_corpus) / "grounding.jsonl";
            if (ev_grounding) require_file(grounding_path, "grounding annotations");

            const auto samples = load_corpus_dir(ev_corpus);
            const Vocabulary vocab = Vocabulary::load(ev_vocab);
            auto loaded = ModelState::load_checkpoint(ev_ckpt, vocab);

            EvalResult combined;
            combined.n_samples = static_cast<int>(samples.size());
            if (ev_zeroshot) {
                const ClinicalDictionary dict = load_dictionary(ev_dict);
                const EvalResult zs = evaluate_zero_shot(samples, dict, *loaded.state);
                combined.per_disease_auc = zs.per_disease_auc;
                combined.mean_auc = zs.mean_auc;
                combined.has_zeroshot = true;
            }
            if (ev_grounding) {
                const auto annotations = load_grounding_annotations(grounding_path);
                const EvalResult gr = evaluate_grounding(samples, annotations, *loaded.state,
                                                         ev_quantile, ev_heatmaps);
                combined.mean_iou = gr.mean_iou;
                combined.mean_cnr = gr.mean_cnr;
                combined.n_annotations = gr.n_annotations;
                combined.has_grounding = true;
            }
            json meta;
            meta["checkpoint_fingerprint"] = loaded.state->fingerprint();
            meta["iou_quantile"] = ev_quantile;
            std::ofstream out(ev_out, std::ios::binary);
            if (!out) throw std::runtime_error("cannot write " + ev_out);
            out << eval_result_to_json(combined, meta.dump()) << "\n";
            std::cout << "wrote " << ev_out << "\n";
        });
    }

    return 1;
}
