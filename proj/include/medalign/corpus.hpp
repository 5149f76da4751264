#pragma once

#include "medalign/nn.hpp"
#include "medalign/rng.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace medalign {

// One image-report pair. Images are HxW grayscale in [0,1].
struct CorpusSample {
    std::string sample_id;
    nn::Matrix image;
    std::string report;
    std::map<std::string, bool> labels;  // evaluation only; may be empty
};

struct SentenceSplit {
    std::vector<std::string> sentences;
    std::vector<int> token_ids;
    // half-open [begin, end) ranges into token_ids, one per sentence
    std::vector<std::pair<int, int>> sentence_boundaries;
};

// Splits on '.', '!' or '?' followed by whitespace or end of text; a
// terminator preceded by another terminator (ellipses, "?!") does not
// split. Fragments without a letter are dropped. Throws if the report is
// empty or nothing survives.
std::vector<std::string> split_sentences(const std::string& report);

// Lowercase whitespace tokenizer; leading/trailing non-alphanumeric
// characters are stripped from each word.
std::vector<std::string> tokenize_words(const std::string& sentence);

class Vocabulary {
public:
    static constexpr int kPad = 0;
    static constexpr int kUnk = 1;
    static constexpr int kCls = 2;
    static constexpr int kMask = 3;
    static constexpr int kReserved = 4;

    static Vocabulary build(const std::vector<CorpusSample>& corpus, int min_count);
    static Vocabulary build_from_reports(const std::vector<std::string>& reports, int min_count);

    int id(const std::string& word) const;  // kUnk for out-of-vocabulary words
    const std::string& word(int id) const;
    int size() const { return static_cast<int>(id_to_word_.size()); }

    void save(const std::filesystem::path& path) const;
    static Vocabulary load(const std::filesystem::path& path);
    uint64_t hash() const;

    bool operator==(const Vocabulary& other) const { return id_to_word_ == other.id_to_word_; }

private:
    Vocabulary();
    std::map<std::string, int> word_to_id_;
    std::vector<std::string> id_to_word_;
};

SentenceSplit tokenize(const std::vector<std::string>& sentences, const Vocabulary& vocab);

struct SyntheticSpec {
    std::vector<std::string> diseases;
    std::map<std::string, std::string> glyph_map;  // disease -> renderer id
    int n_samples = 0;
    double distractor_rate = 0.0;
    double negative_rate = 0.5;
    std::map<std::string, double> prevalence;
    uint64_t seed = 0;
    int image_size = 64;
    int glyph_size = 16;

    static SyntheticSpec from_json_file(const std::filesystem::path& path);
    std::string to_json() const;
};

struct GlyphBox {
    std::string disease;
    int x0, y0, x1, y1;  // half-open pixel box
};

struct SyntheticSample {
    CorpusSample sample;
    std::vector<GlyphBox> glyphs;
};

const std::vector<std::string>& glyph_renderer_ids();

std::vector<SyntheticSample> gen_synthetic(const SyntheticSpec& spec);

// The disease-presence template used by the generator; keep in sync with
// the dictionary's manual positives.
std::string positive_template(const std::string& disease);
std::string negative_template(const std::string& disease);

// --- on-disk corpus -------------------------------------------------------
// Directory layout: samples.jsonl, images/<id>.f32, grounding.jsonl.
// Image file format: u32 H, u32 W (little endian), then H*W float32
// little-endian values, row-major.

void save_image_f32(const nn::Matrix& image, const std::filesystem::path& path);
nn::Matrix load_image_f32(const std::filesystem::path& path);

void save_corpus_dir(const std::vector<SyntheticSample>& samples, const std::filesystem::path& dir);
std::vector<CorpusSample> load_corpus_dir(const std::filesystem::path& dir);

}  // namespace medalign
