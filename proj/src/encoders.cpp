#include "medalign/encoders.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace medalign {

using json = nlohmann::json;
using nn::Matrix;
using nn::Tensor;

namespace {

uint64_t fnv1a(const std::string& data) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : data) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

constexpr char kMagic[8] = {'M', 'A', 'L', 'N', 'C', 'K', 'P', 'T'};
constexpr uint32_t kCheckpointVersion = 1;

}  // namespace

void ModelConfig::validate() const {
    if (image_height <= 0 || image_width <= 0 || patch_size <= 0)
        throw std::invalid_argument("model config: non-positive image/patch size");
    if (image_height % patch_size != 0 || image_width % patch_size != 0)
        throw std::invalid_argument("model config: image size not divisible by patch size");
    if (d_model <= 0 || n_heads <= 0 || d_model % n_heads != 0)
        throw std::invalid_argument("model config: d_model must be a positive multiple of n_heads");
    if (n_blocks <= 0 || itm_blocks <= 0 || mlp_hidden <= 0 || embed_dim <= 0 || max_text_len <= 1)
        throw std::invalid_argument("model config: non-positive size field");
    if (tau1 <= 0.0 || tau2 <= 0.0 || tau3 <= 0.0)
        throw std::invalid_argument("model config: temperatures must be positive");
}

std::string ModelConfig::to_json() const {
    json j;
    j["image_height"] = image_height;
    j["image_width"] = image_width;
    j["patch_size"] = patch_size;
    j["d_model"] = d_model;
    j["n_heads"] = n_heads;
    j["n_blocks"] = n_blocks;
    j["mlp_hidden"] = mlp_hidden;
    j["embed_dim"] = embed_dim;
    j["max_text_len"] = max_text_len;
    j["itm_blocks"] = itm_blocks;
    j["tau1"] = tau1;
    j["tau2"] = tau2;
    j["tau3"] = tau3;
    j["init_seed"] = init_seed;
    return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
    json j = json::parse(text);
    ModelConfig c;
    c.image_height = j.at("image_height").get<int>();
    c.image_width = j.at("image_width").get<int>();
    c.patch_size = j.at("patch_size").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.n_blocks = j.at("n_blocks").get<int>();
    c.mlp_hidden = j.at("mlp_hidden").get<int>();
    c.embed_dim = j.at("embed_dim").get<int>();
    c.max_text_len = j.at("max_text_len").get<int>();
    c.itm_blocks = j.at("itm_blocks").get<int>();
    c.tau1 = j.at("tau1").get<double>();
    c.tau2 = j.at("tau2").get<double>();
    c.tau3 = j.at("tau3").get<double>();
    c.init_seed = j.at("init_seed").get<uint64_t>();
    c.validate();
    return c;
}

Tensor ModelState::make_param(const std::string& name, Eigen::Index rows, Eigen::Index cols,
                              Rng* rng, double stddev) {
    Matrix m(rows, cols);
    if (rng && stddev > 0.0) {
        for (Eigen::Index r = 0; r < rows; ++r)
            for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = rng->normal(0.0, stddev);
    } else if (stddev == 0.0) {
        m.setZero();
    } else {
        m.setOnes();  // layer-norm gains when not initializing from rng
    }
    Tensor t = nn::parameter(std::move(m));
    params_.emplace_back(name, t);
    return t;
}

void ModelState::build_parameters(bool init) {
    const int d = config_.d_model;
    const int C = config_.embed_dim;
    const int V = vocab_.size();
    const int pdim = config_.patch_size * config_.patch_size;

    Rng rng(mix_seed(config_.init_seed, 0xA11CE));
    Rng* r = init ? &rng : nullptr;
    const double s = 0.02;

    auto ln = [&](const std::string& name) {
        LayerNormParams p;
        p.g = make_param(name + ".g", 1, d, nullptr, -1.0);  // ones
        p.b = make_param(name + ".b", 1, d, nullptr, 0.0);
        return p;
    };
    auto block = [&](const std::string& name, int kv_dim) {
        Block blk;
        blk.attn.ln = ln(name + ".ln1");
        blk.attn.wq = make_param(name + ".attn.wq", d, d, r, s);
        blk.attn.bq = make_param(name + ".attn.bq", 1, d, nullptr, 0.0);
        blk.attn.wk = make_param(name + ".attn.wk", kv_dim, d, r, s);
        blk.attn.bk = make_param(name + ".attn.bk", 1, d, nullptr, 0.0);
        blk.attn.wv = make_param(name + ".attn.wv", kv_dim, d, r, s);
        blk.attn.bv = make_param(name + ".attn.bv", 1, d, nullptr, 0.0);
        blk.attn.wo = make_param(name + ".attn.wo", d, d, r, s);
        blk.attn.bo = make_param(name + ".attn.bo", 1, d, nullptr, 0.0);
        blk.mlp.ln = ln(name + ".ln2");
        blk.mlp.w1 = make_param(name + ".mlp.w1", d, config_.mlp_hidden, r, s);
        blk.mlp.b1 = make_param(name + ".mlp.b1", 1, config_.mlp_hidden, nullptr, 0.0);
        blk.mlp.w2 = make_param(name + ".mlp.w2", config_.mlp_hidden, d, r, s);
        blk.mlp.b2 = make_param(name + ".mlp.b2", 1, d, nullptr, 0.0);
        return blk;
    };

    // no image positional embedding: patch identity is content-only, which
    // keeps the encoder translation equivariant (constant image -> constant
    // saliency)
    img_patch_w_ = make_param("img.patch.w", pdim, d, r, s);
    img_patch_b_ = make_param("img.patch.b", 1, d, nullptr, 0.0);
    img_cls_ = make_param("img.cls", 1, d, r, s);
    for (int i = 0; i < config_.n_blocks; ++i)
        img_blocks_.push_back(block("img.blk" + std::to_string(i), d));
    img_ln_f_ = ln("img.ln_f");
    img_proj_w_ = make_param("img.proj.w", d, C, r, s);
    img_proj_b_ = make_param("img.proj.b", 1, C, nullptr, 0.0);

    txt_emb_ = make_param("txt.emb", V, d, r, s);
    txt_pos_ = make_param("txt.pos", config_.max_text_len, d, r, s);
    for (int i = 0; i < config_.n_blocks; ++i)
        txt_blocks_.push_back(block("txt.blk" + std::to_string(i), d));
    txt_ln_f_ = ln("txt.ln_f");
    txt_proj_w_ = make_param("txt.proj.w", d, C, r, s);
    txt_proj_b_ = make_param("txt.proj.b", 1, C, nullptr, 0.0);
    mlm_w_ = make_param("mlm.w", d, V, r, s);
    mlm_b_ = make_param("mlm.b", 1, V, nullptr, 0.0);

    itm_emb_ = make_param("itm.emb", V, d, r, s);
    itm_pos_ = make_param("itm.pos", config_.max_text_len, d, r, s);
    for (int i = 0; i < config_.itm_blocks; ++i)
        itm_blocks_.push_back(block("itm.blk" + std::to_string(i), C));  // k/v from C-dim rows
    itm_ln_f_ = ln("itm.ln_f");
    itm_head_w_ = make_param("itm.head.w", d, 2, r, s);
    itm_head_b_ = make_param("itm.head.b", 1, 2, nullptr, 0.0);
}

ModelState::ModelState(const ModelConfig& config, const Vocabulary& vocab)
    : ModelState(config, vocab, true) {}

ModelState::ModelState(const ModelConfig& config, Vocabulary vocab, bool init)
    : config_(config), vocab_(std::move(vocab)) {
    config_.validate();
    build_parameters(init);
}

namespace {

// multi-head attention core; q, k, v are full-width projections
Tensor attend(const Tensor& q, const Tensor& k, const Tensor& v, int n_heads) {
    const Eigen::Index dh = q.cols() / n_heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Tensor> heads;
    heads.reserve(static_cast<size_t>(n_heads));
    for (int h = 0; h < n_heads; ++h) {
        Tensor qh = nn::slice_cols(q, h * dh, dh);
        Tensor kh = nn::slice_cols(k, h * dh, dh);
        Tensor vh = nn::slice_cols(v, h * dh, dh);
        Tensor scores = nn::scale(nn::matmul(qh, nn::transpose(kh)), inv_sqrt);
        heads.push_back(nn::matmul(nn::softmax_rows(scores), vh));
    }
    return nn::concat_cols(heads);
}

}  // namespace

Tensor ModelState::self_attention_block(Tensor x, const Block& blk) const {
    Tensor h = nn::layer_norm_rows(x, blk.attn.ln.g, blk.attn.ln.b);
    Tensor q = nn::add_rowvec(nn::matmul(h, blk.attn.wq), blk.attn.bq);
    Tensor k = nn::add_rowvec(nn::matmul(h, blk.attn.wk), blk.attn.bk);
    Tensor v = nn::add_rowvec(nn::matmul(h, blk.attn.wv), blk.attn.bv);
    Tensor o = nn::add_rowvec(nn::matmul(attend(q, k, v, config_.n_heads), blk.attn.wo), blk.attn.bo);
    x = nn::add(x, o);
    Tensor m = nn::layer_norm_rows(x, blk.mlp.ln.g, blk.mlp.ln.b);
    m = nn::gelu(nn::add_rowvec(nn::matmul(m, blk.mlp.w1), blk.mlp.b1));
    m = nn::add_rowvec(nn::matmul(m, blk.mlp.w2), blk.mlp.b2);
    return nn::add(x, m);
}

Tensor ModelState::cross_attention_block(Tensor x, const Tensor& memory, const Block& blk) const {
    Tensor h = nn::layer_norm_rows(x, blk.attn.ln.g, blk.attn.ln.b);
    Tensor q = nn::add_rowvec(nn::matmul(h, blk.attn.wq), blk.attn.bq);
    Tensor k = nn::add_rowvec(nn::matmul(memory, blk.attn.wk), blk.attn.bk);
    Tensor v = nn::add_rowvec(nn::matmul(memory, blk.attn.wv), blk.attn.bv);
    Tensor o = nn::add_rowvec(nn::matmul(attend(q, k, v, config_.n_heads), blk.attn.wo), blk.attn.bo);
    x = nn::add(x, o);
    Tensor m = nn::layer_norm_rows(x, blk.mlp.ln.g, blk.mlp.ln.b);
    m = nn::gelu(nn::add_rowvec(nn::matmul(m, blk.mlp.w1), blk.mlp.b1));
    m = nn::add_rowvec(nn::matmul(m, blk.mlp.w2), blk.mlp.b2);
    return nn::add(x, m);
}

ImageGraph ModelState::encode_image_graph(const Matrix& image) const {
    const int p = config_.patch_size;
    if (image.rows() % p != 0 || image.cols() % p != 0)
        throw std::invalid_argument("encode_image: image shape not divisible by patch size");
    if (image.rows() != config_.image_height || image.cols() != config_.image_width)
        throw std::invalid_argument("encode_image: image shape does not match the model config");

    const int py = config_.patches_y(), px = config_.patches_x();
    Matrix patches(py * px, p * p);
    for (int gy = 0; gy < py; ++gy) {
        for (int gx = 0; gx < px; ++gx) {
            Eigen::Index row = gy * px + gx;
            for (int dy = 0; dy < p; ++dy)
                for (int dx = 0; dx < p; ++dx)
                    patches(row, dy * p + dx) = image(gy * p + dy, gx * p + dx);
        }
    }

    Tensor x = nn::add_rowvec(nn::matmul(nn::constant(std::move(patches)), img_patch_w_), img_patch_b_);
    x = nn::concat_rows({img_cls_, x});
    for (const auto& blk : img_blocks_) x = self_attention_block(x, blk);
    x = nn::layer_norm_rows(x, img_ln_f_.g, img_ln_f_.b);

    ImageGraph g;
    g.local = nn::l2_normalize_rows(nn::add_rowvec(nn::matmul(x, img_proj_w_), img_proj_b_));
    g.global = nn::mean_rows(nn::slice_rows(g.local, 1, g.local.rows() - 1));
    return g;
}

TextGraph ModelState::encode_text_graph(const std::vector<int>& masked_token_ids,
                                        const std::vector<std::pair<int, int>>& boundaries) const {
    if (boundaries.empty()) throw std::invalid_argument("encode_text: empty sentence list");
    const int n = static_cast<int>(masked_token_ids.size());
    if (1 + n > config_.max_text_len)
        throw std::invalid_argument("encode_text: report exceeds max_text_len");

    std::vector<int> ids;
    ids.reserve(static_cast<size_t>(n) + 1);
    ids.push_back(Vocabulary::kCls);
    ids.insert(ids.end(), masked_token_ids.begin(), masked_token_ids.end());

    Tensor x = nn::add(nn::rows_from(txt_emb_, ids), nn::slice_rows(txt_pos_, 0, 1 + n));
    for (const auto& blk : txt_blocks_) x = self_attention_block(x, blk);
    x = nn::layer_norm_rows(x, txt_ln_f_.g, txt_ln_f_.b);

    std::vector<Tensor> sentence_rows;
    sentence_rows.reserve(boundaries.size());
    for (const auto& [b, e] : boundaries) {
        if (b < 0 || e <= b || e > n) throw std::invalid_argument("encode_text: bad sentence boundary");
        sentence_rows.push_back(nn::mean_rows(nn::slice_rows(x, 1 + b, e - b)));
    }

    TextGraph g;
    g.hidden = x;
    Tensor sent = nn::concat_rows(sentence_rows);
    g.local = nn::l2_normalize_rows(nn::add_rowvec(nn::matmul(sent, txt_proj_w_), txt_proj_b_));
    g.global = nn::l2_normalize_rows(
        nn::add_rowvec(nn::matmul(nn::slice_rows(x, 0, 1), txt_proj_w_), txt_proj_b_));
    return g;
}

Tensor ModelState::mlm_logits_graph(const TextGraph& text, const std::vector<int>& mask_positions) const {
    if (mask_positions.empty()) throw std::invalid_argument("mlm_logits: no positions");
    std::vector<Tensor> rows;
    rows.reserve(mask_positions.size());
    for (int pos : mask_positions) rows.push_back(nn::slice_rows(text.hidden, 1 + pos, 1));
    return nn::add_rowvec(nn::matmul(nn::concat_rows(rows), mlm_w_), mlm_b_);
}

Tensor ModelState::itm_logits_graph(const Tensor& image_local,
                                    const std::vector<int>& sentence_tokens) const {
    if (sentence_tokens.empty()) throw std::invalid_argument("itm_forward: empty sentence tokens");
    const int n = static_cast<int>(sentence_tokens.size());
    if (n > config_.max_text_len)
        throw std::invalid_argument("itm_forward: sentence exceeds max_text_len");

    Tensor x = nn::add(nn::rows_from(itm_emb_, sentence_tokens), nn::slice_rows(itm_pos_, 0, n));
    for (const auto& blk : itm_blocks_) x = cross_attention_block(x, image_local, blk);
    x = nn::layer_norm_rows(x, itm_ln_f_.g, itm_ln_f_.b);
    return nn::add_rowvec(nn::matmul(nn::mean_rows(x), itm_head_w_), itm_head_b_);
}

uint64_t ModelState::fingerprint() const {
    return fnv1a(config_.to_json() + "#" + std::to_string(vocab_.hash()));
}

void ModelState::assert_finite(const std::string& context) const {
    for (const auto& [name, p] : params_) {
        if (!p.value().allFinite())
            throw std::runtime_error("non-finite parameter '" + name + "' " + context);
    }
}

// --- checkpoint io ----------------------------------------------------------

namespace {

void write_u32(std::ofstream& out, uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }
void write_u64(std::ofstream& out, uint64_t v) { out.write(reinterpret_cast<const char*>(&v), 8); }

uint32_t read_u32(std::ifstream& in) {
    uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), 4);
    return v;
}
uint64_t read_u64(std::ifstream& in) {
    uint64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), 8);
    return v;
}

void write_array(std::ofstream& out, const std::string& name, const Matrix& m) {
    write_u32(out, static_cast<uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32(out, static_cast<uint32_t>(m.rows()));
    write_u32(out, static_cast<uint32_t>(m.cols()));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        out.write(reinterpret_cast<const char*>(m.row(r).eval().data()),
                  static_cast<std::streamsize>(m.cols() * sizeof(double)));
}

std::pair<std::string, Matrix> read_array(std::ifstream& in) {
    const uint32_t name_len = read_u32(in);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    const uint32_t rows = read_u32(in);
    const uint32_t cols = read_u32(in);
    Matrix m(rows, cols);
    std::vector<double> row(cols);
    for (uint32_t r = 0; r < rows; ++r) {
        in.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(cols * sizeof(double)));
        for (uint32_t c = 0; c < cols; ++c) m(r, c) = row[c];
    }
    return {name, std::move(m)};
}

}  // namespace

void ModelState::save_checkpoint(const std::filesystem::path& path,
                                 const std::vector<std::pair<std::string, Matrix>>& extra_arrays,
                                 const std::string& extra_meta_json) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("checkpoint: cannot write " + path.string());

    json meta;
    meta["config"] = json::parse(config_.to_json());
    meta["config_fingerprint"] = fingerprint();
    meta["vocab_hash"] = vocab_.hash();
    meta["temperatures"] = {config_.tau1, config_.tau2, config_.tau3};
    meta["extra"] = json::parse(extra_meta_json);
    const std::string meta_str = meta.dump();

    out.write(kMagic, 8);
    write_u32(out, kCheckpointVersion);
    write_u64(out, meta_str.size());
    out.write(meta_str.data(), static_cast<std::streamsize>(meta_str.size()));
    write_u32(out, static_cast<uint32_t>(params_.size() + extra_arrays.size()));
    for (const auto& [name, p] : params_) write_array(out, name, p.value());
    for (const auto& [name, m] : extra_arrays) write_array(out, name, m);
    if (!out) throw std::runtime_error("checkpoint: write failed for " + path.string());
}

ModelState::LoadedCheckpoint ModelState::load_checkpoint(const std::filesystem::path& path,
                                                         const Vocabulary& vocab) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint: cannot read " + path.string());
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kMagic, 8) != 0)
        throw std::runtime_error("checkpoint: bad magic in " + path.string());
    if (read_u32(in) != kCheckpointVersion)
        throw std::runtime_error("checkpoint: unsupported version in " + path.string());
    const uint64_t meta_len = read_u64(in);
    std::string meta_str(meta_len, '\0');
    in.read(meta_str.data(), static_cast<std::streamsize>(meta_len));
    json meta = json::parse(meta_str);

    const ModelConfig config = ModelConfig::from_json(meta.at("config").dump());
    if (meta.at("vocab_hash").get<uint64_t>() != vocab.hash())
        throw std::runtime_error("checkpoint: vocabulary hash mismatch; incompatible state");

    LoadedCheckpoint loaded;
    loaded.state = std::unique_ptr<ModelState>(new ModelState(config, vocab, false));
    loaded.extra_meta_json = meta.at("extra").dump();

    std::map<std::string, Matrix> arrays;
    const uint32_t n = read_u32(in);
    for (uint32_t i = 0; i < n; ++i) {
        auto [name, m] = read_array(in);
        if (!in) throw std::runtime_error("checkpoint: truncated file " + path.string());
        arrays.emplace(std::move(name), std::move(m));
    }
    for (auto& [name, p] : loaded.state->params_) {
        auto it = arrays.find(name);
        if (it == arrays.end())
            throw std::runtime_error("checkpoint: missing parameter '" + name + "'");
        if (it->second.rows() != p.value().rows() || it->second.cols() != p.value().cols())
            throw std::runtime_error("checkpoint: shape mismatch for '" + name + "'");
        p.value() = it->second;
        arrays.erase(it);
    }
    loaded.extra_arrays = std::move(arrays);
    return loaded;
}

// --- value-level API --------------------------------------------------------

ImageRepr encode_image(const Matrix& image, const ModelState& state) {
    nn::NoGradGuard guard;
    ImageGraph g = state.encode_image_graph(image);
    if (!g.local.value().allFinite()) throw std::runtime_error("encode_image: non-finite output");
    return ImageRepr{g.local.value(), g.global.value()};
}

std::vector<int> choose_mask_positions(int n_tokens, double mask_ratio, Rng& rng) {
    const int k = std::max(1, static_cast<int>(std::floor(mask_ratio * n_tokens)));
    std::vector<int> idx(static_cast<size_t>(n_tokens));
    for (int i = 0; i < n_tokens; ++i) idx[static_cast<size_t>(i)] = i;
    // partial Fisher-Yates: first k entries become the masked positions
    for (int i = 0; i < k && i < n_tokens; ++i) {
        const int j = i + static_cast<int>(rng.below(static_cast<uint64_t>(n_tokens - i)));
        std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
    }
    idx.resize(static_cast<size_t>(std::min(k, n_tokens)));
    std::sort(idx.begin(), idx.end());
    return idx;
}

std::pair<TextRepr, std::vector<MlmTarget>> encode_text(const SentenceSplit& split,
                                                        const ModelState& state,
                                                        double mask_ratio, Rng* rng) {
    if (split.sentences.empty()) throw std::invalid_argument("encode_text: empty sentence list");
    if (mask_ratio < 0.0 || mask_ratio >= 1.0)
        throw std::invalid_argument("encode_text: mask_ratio must be in [0, 1)");

    std::vector<int> ids = split.token_ids;
    std::vector<MlmTarget> targets;
    if (mask_ratio > 0.0) {
        if (!rng) throw std::invalid_argument("encode_text: mask_ratio > 0 requires an rng");
        for (int pos : choose_mask_positions(static_cast<int>(ids.size()), mask_ratio, *rng)) {
            targets.push_back({pos, ids[static_cast<size_t>(pos)]});
            ids[static_cast<size_t>(pos)] = Vocabulary::kMask;
        }
    }

    nn::NoGradGuard guard;
    TextGraph g = state.encode_text_graph(ids, split.sentence_boundaries);
    if (!g.local.value().allFinite()) throw std::runtime_error("encode_text: non-finite output");
    return {TextRepr{g.local.value(), g.global.value()}, std::move(targets)};
}

std::array<double, 2> itm_forward(const ImageRepr& image_repr,
                                  const std::vector<int>& sentence_tokens,
                                  const ModelState& state) {
    nn::NoGradGuard guard;
    Tensor logits = state.itm_logits_graph(nn::constant(image_repr.local), sentence_tokens);
    return {logits.value()(0, 0), logits.value()(0, 1)};
}

std::array<double, 2> itm_softmax(const std::array<double, 2>& logits) {
    const double m = std::max(logits[0], logits[1]);
    const double a = std::exp(logits[0] - m), b = std::exp(logits[1] - m);
    return {a / (a + b), b / (a + b)};
}

}  // namespace medalign
