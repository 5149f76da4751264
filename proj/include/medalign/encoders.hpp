#pragma once

#include "medalign/corpus.hpp"
#include "medalign/nn.hpp"
#include "medalign/rng.hpp"

#include <array>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace medalign {

struct ModelConfig {
    int image_height = 64;
    int image_width = 64;
    int patch_size = 8;
    int d_model = 64;      // encoder width
    int n_heads = 4;
    int n_blocks = 2;
    int mlp_hidden = 128;
    int embed_dim = 32;    // C, the shared projection space
    int max_text_len = 128;
    int itm_blocks = 2;
    double tau1 = 0.07;
    double tau2 = 0.07;
    double tau3 = 0.1;
    uint64_t init_seed = 0;

    int patches_x() const { return image_width / patch_size; }
    int patches_y() const { return image_height / patch_size; }
    int n_patches() const { return patches_x() * patches_y(); }

    std::string to_json() const;
    static ModelConfig from_json(const std::string& text);
    void validate() const;
};

// K_v x C local rows with the [class] row at index 0; global is the mean
// of the non-class rows.
struct ImageRepr {
    nn::Matrix local;
    nn::Matrix global;  // 1 x C
};

// K_t x C rows, one per sentence; global is the projected [class] output.
struct TextRepr {
    nn::Matrix local;
    nn::Matrix global;  // 1 x C
};

struct MlmTarget {
    int position;  // index into the split's token_ids
    int token_id;  // original id at that position
};

struct ImageGraph {
    nn::Tensor local;   // K_v x C
    nn::Tensor global;  // 1 x C
};

struct TextGraph {
    nn::Tensor local;   // K_t x C
    nn::Tensor global;  // 1 x C
    nn::Tensor hidden;  // (1+T) x d_model contextual rows, [class] first
};

class ModelState {
public:
    ModelState(const ModelConfig& config, const Vocabulary& vocab);
    ModelState(const ModelState&) = delete;
    ModelState& operator=(const ModelState&) = delete;
    ModelState(ModelState&&) = default;
    ModelState& operator=(ModelState&&) = default;

    const ModelConfig& config() const { return config_; }
    const Vocabulary& vocab() const { return vocab_; }
    std::vector<std::pair<std::string, nn::Tensor>>& parameters() { return params_; }
    const std::vector<std::pair<std::string, nn::Tensor>>& parameters() const { return params_; }

    // graph builders (used for training and by the value-level API)
    ImageGraph encode_image_graph(const nn::Matrix& image) const;
    TextGraph encode_text_graph(const std::vector<int>& masked_token_ids,
                                const std::vector<std::pair<int, int>>& boundaries) const;
    nn::Tensor mlm_logits_graph(const TextGraph& text,
                                const std::vector<int>& mask_positions) const;  // n x V
    nn::Tensor itm_logits_graph(const nn::Tensor& image_local,
                                const std::vector<int>& sentence_tokens) const;  // 1 x 2

    uint64_t fingerprint() const;
    void assert_finite(const std::string& context) const;

    void save_checkpoint(const std::filesystem::path& path,
                         const std::vector<std::pair<std::string, nn::Matrix>>& extra_arrays = {},
                         const std::string& extra_meta_json = "{}") const;

    struct LoadedCheckpoint {
        std::unique_ptr<ModelState> state;
        std::map<std::string, nn::Matrix> extra_arrays;
        std::string extra_meta_json;
    };
    static LoadedCheckpoint load_checkpoint(const std::filesystem::path& path,
                                            const Vocabulary& vocab);

private:
    struct LayerNormParams {
        nn::Tensor g, b;
    };
    struct AttnParams {
        LayerNormParams ln;
        nn::Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    };
    struct MlpParams {
        LayerNormParams ln;
        nn::Tensor w1, b1, w2, b2;
    };
    struct Block {
        AttnParams attn;
        MlpParams mlp;
    };

    ModelState(const ModelConfig& config, Vocabulary vocab, bool init);
    nn::Tensor make_param(const std::string& name, Eigen::Index rows, Eigen::Index cols,
                          Rng* rng, double stddev);
    void build_parameters(bool init);
    nn::Tensor self_attention_block(nn::Tensor x, const Block& blk) const;
    nn::Tensor cross_attention_block(nn::Tensor x, const nn::Tensor& memory, const Block& blk) const;

    ModelConfig config_;
    Vocabulary vocab_;
    std::vector<std::pair<std::string, nn::Tensor>> params_;

    // image encoder
    nn::Tensor img_patch_w_, img_patch_b_, img_cls_;
    std::vector<Block> img_blocks_;
    LayerNormParams img_ln_f_;
    nn::Tensor img_proj_w_, img_proj_b_;
    // text encoder
    nn::Tensor txt_emb_, txt_pos_;
    std::vector<Block> txt_blocks_;
    LayerNormParams txt_ln_f_;
    nn::Tensor txt_proj_w_, txt_proj_b_;
    nn::Tensor mlm_w_, mlm_b_;
    // ITM decoder
    nn::Tensor itm_emb_, itm_pos_;
    std::vector<Block> itm_blocks_;
    LayerNormParams itm_ln_f_;
    nn::Tensor itm_head_w_, itm_head_b_;
};

// --- value-level operations (inference mode) -------------------------------

ImageRepr encode_image(const nn::Matrix& image, const ModelState& state);

// Selects floor(mask_ratio * n) positions, at least one when the ratio is
// positive; masked ids are replaced by the [mask] token. rng is required
// when mask_ratio > 0.
std::pair<TextRepr, std::vector<MlmTarget>> encode_text(const SentenceSplit& split,
                                                        const ModelState& state,
                                                        double mask_ratio, Rng* rng = nullptr);

// logits[0] = match, logits[1] = no-match
std::array<double, 2> itm_forward(const ImageRepr& image_repr,
                                  const std::vector<int>& sentence_tokens,
                                  const ModelState& state);

std::array<double, 2> itm_softmax(const std::array<double, 2>& logits);

std::vector<int> choose_mask_positions(int n_tokens, double mask_ratio, Rng& rng);

}  // namespace medalign
