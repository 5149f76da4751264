#include "medalign/corpus.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cctype>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace medalign {

using json = nlohmann::json;

namespace {

bool is_terminator(char c) { return c == '.' || c == '!' || c == '?'; }

bool has_letter(const std::string& s) {
    return std::any_of(s.begin(), s.end(),
                       [](unsigned char c) { return std::isalpha(c) != 0; });
}

std::string trim(const std::string& s) {
    size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

uint64_t fnv1a(const std::string& data) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : data) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

void write_line(std::ofstream& out, const json& j) { out << j.dump() << "\n"; }

}  // namespace

std::vector<std::string> split_sentences(const std::string& report) {
    const std::string text = trim(report);
    if (text.empty()) throw std::invalid_argument("split_sentences: empty report");

    std::vector<std::string> out;
    size_t start = 0;
    auto emit = [&](size_t begin, size_t end) {
        std::string frag = trim(text.substr(begin, end - begin));
        if (!frag.empty() && has_letter(frag)) out.push_back(std::move(frag));
    };
    for (size_t i = 0; i < text.size(); ++i) {
        const bool at_end = i + 1 == text.size();
        const bool ws_next = !at_end && std::isspace(static_cast<unsigned char>(text[i + 1]));
        const bool run = i > 0 && is_terminator(text[i - 1]);
        if (is_terminator(text[i]) && (at_end || ws_next) && !run) {
            emit(start, i + 1);
            start = i + 1;
        }
    }
    if (start < text.size()) emit(start, text.size());
    if (out.empty()) throw std::invalid_argument("split_sentences: degenerate report, no sentence with a letter");
    return out;
}

std::vector<std::string> tokenize_words(const std::string& sentence) {
    std::vector<std::string> words;
    std::istringstream in(sentence);
    std::string raw;
    while (in >> raw) {
        size_t b = 0, e = raw.size();
        while (b < e && !std::isalnum(static_cast<unsigned char>(raw[b]))) ++b;
        while (e > b && !std::isalnum(static_cast<unsigned char>(raw[e - 1]))) --e;
        if (b == e) continue;
        std::string w = raw.substr(b, e - b);
        std::transform(w.begin(), w.end(), w.begin(),
                       [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
        words.push_back(std::move(w));
    }
    return words;
}

Vocabulary::Vocabulary() : id_to_word_{"<pad>", "<unk>", "<cls>", "<mask>"} {
    for (int i = 0; i < kReserved; ++i) word_to_id_[id_to_word_[i]] = i;
}

Vocabulary Vocabulary::build(const std::vector<CorpusSample>& corpus, int min_count) {
    if (corpus.empty()) throw std::invalid_argument("build_vocab: empty corpus");
    std::vector<std::string> reports;
    reports.reserve(corpus.size());
    for (const auto& s : corpus) reports.push_back(s.report);
    return build_from_reports(reports, min_count);
}

Vocabulary Vocabulary::build_from_reports(const std::vector<std::string>& reports, int min_count) {
    if (reports.empty()) throw std::invalid_argument("build_vocab: empty corpus");
    std::map<std::string, int> counts;
    for (const auto& r : reports) {
        for (const auto& w : tokenize_words(r)) ++counts[w];
    }
    Vocabulary v;
    for (const auto& [word, count] : counts) {  // map iteration = lexicographic ids
        if (count >= min_count) {
            v.word_to_id_[word] = static_cast<int>(v.id_to_word_.size());
            v.id_to_word_.push_back(word);
        }
    }
    return v;
}

int Vocabulary::id(const std::string& word) const {
    auto it = word_to_id_.find(word);
    return it == word_to_id_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::word(int id) const {
    if (id < 0 || id >= size()) throw std::out_of_range("Vocabulary::word: bad id");
    return id_to_word_[static_cast<size_t>(id)];
}

void Vocabulary::save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("vocabulary: cannot write " + path.string());
    for (int i = 0; i < size(); ++i) out << id_to_word_[static_cast<size_t>(i)] << "\t" << i << "\n";
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("vocabulary: cannot read " + path.string());
    Vocabulary v;
    v.word_to_id_.clear();
    v.id_to_word_.clear();
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const size_t tab = line.find('\t');
        if (tab == std::string::npos) throw std::runtime_error("vocabulary: malformed line '" + line + "'");
        const std::string word = line.substr(0, tab);
        const int id = std::stoi(line.substr(tab + 1));
        if (id != static_cast<int>(v.id_to_word_.size()))
            throw std::runtime_error("vocabulary: ids must be dense and sorted");
        v.word_to_id_[word] = id;
        v.id_to_word_.push_back(word);
    }
    if (v.id_to_word_.size() < kReserved) throw std::runtime_error("vocabulary: missing reserved entries");
    return v;
}

uint64_t Vocabulary::hash() const {
    std::string blob;
    for (int i = 0; i < size(); ++i) {
        blob += id_to_word_[static_cast<size_t>(i)];
        blob += '\t';
        blob += std::to_string(i);
        blob += '\n';
    }
    return fnv1a(blob);
}

SentenceSplit tokenize(const std::vector<std::string>& sentences, const Vocabulary& vocab) {
    if (sentences.empty()) throw std::invalid_argument("tokenize: empty sentence list");
    SentenceSplit out;
    out.sentences = sentences;
    for (const auto& s : sentences) {
        const auto words = tokenize_words(s);
        if (words.empty()) throw std::invalid_argument("tokenize: sentence without tokens: '" + s + "'");
        const int begin = static_cast<int>(out.token_ids.size());
        for (const auto& w : words) out.token_ids.push_back(vocab.id(w));
        out.sentence_boundaries.emplace_back(begin, static_cast<int>(out.token_ids.size()));
    }
    return out;
}

std::string positive_template(const std::string& disease) { return "There is " + disease + "."; }
std::string negative_template(const std::string& disease) { return "No " + disease + "."; }

namespace {

// Distractor sentences are keyword-free with respect to the shipped
// dictionary (no disease stems, no "air"/"mass"/"pleural" substrings).
const std::vector<std::string> kDistractors = {
    "The patient was positioned upright for the exam.",
    "Comparison is made with the prior study.",
    "The visualized osseous structures are intact.",
    "Technical image quality is adequate.",
    "Monitoring leads project over the torso.",
    "Surgical clips are noted in the upper abdomen.",
    "The exam was performed at the bedside.",
    "Degenerative changes are present in the spine.",
};

void render_glyph(nn::Matrix& img, const std::string& renderer, int x0, int y0, int g, double v) {
    auto set = [&](int y, int x) { img(y0 + y, x0 + x) = v; };
    const double c = (g - 1) / 2.0;
    const double r = g / 2.0 - 1.0;
    if (renderer == "disc") {
        for (int y = 0; y < g; ++y)
            for (int x = 0; x < g; ++x)
                if ((x - c) * (x - c) + (y - c) * (y - c) <= r * r) set(y, x);
    } else if (renderer == "square") {
        for (int y = 1; y < g - 1; ++y)
            for (int x = 1; x < g - 1; ++x) set(y, x);
    } else if (renderer == "cross") {
        const int half = g / 2, arm = std::max(1, g / 6);
        for (int y = half - arm; y < half + arm; ++y)
            for (int x = 0; x < g; ++x) set(y, x);
        for (int y = 0; y < g; ++y)
            for (int x = half - arm; x < half + arm; ++x) set(y, x);
    } else if (renderer == "ring") {
        const double ri = std::max(1.0, r - g / 4.0);
        for (int y = 0; y < g; ++y)
            for (int x = 0; x < g; ++x) {
                const double d2 = (x - c) * (x - c) + (y - c) * (y - c);
                if (d2 <= r * r && d2 >= ri * ri) set(y, x);
            }
    } else if (renderer == "triangle") {
        for (int y = 0; y < g; ++y) {
            const double hw = (static_cast<double>(y) / (g - 1)) * (g / 2.0 - 1.0);
            for (int x = static_cast<int>(std::ceil(c - hw)); x <= static_cast<int>(std::floor(c + hw)); ++x)
                if (x >= 0 && x < g) set(y, x);
        }
    } else if (renderer == "checker") {
        const int cell = std::max(2, g / 4);
        for (int y = 0; y < g; ++y)
            for (int x = 0; x < g; ++x)
                if (((y / cell) + (x / cell)) % 2 == 0) set(y, x);
    } else {
        throw std::invalid_argument("gen_synthetic: unknown glyph renderer '" + renderer + "'");
    }
}

bool boxes_overlap(const GlyphBox& a, const GlyphBox& b, int pad) {
    return a.x0 < b.x1 + pad && b.x0 < a.x1 + pad && a.y0 < b.y1 + pad && b.y0 < a.y1 + pad;
}

}  // namespace

const std::vector<std::string>& glyph_renderer_ids() {
    static const std::vector<std::string> ids = {"disc", "square", "cross", "ring", "triangle", "checker"};
    return ids;
}

std::vector<SyntheticSample> gen_synthetic(const SyntheticSpec& spec) {
    if (spec.n_samples <= 0) throw std::invalid_argument("gen_synthetic: n_samples must be positive");
    if (spec.diseases.empty()) throw std::invalid_argument("gen_synthetic: no diseases");
    for (const auto& d : spec.diseases) {
        if (!spec.glyph_map.count(d)) throw std::invalid_argument("gen_synthetic: no glyph for disease '" + d + "'");
        const double p = spec.prevalence.count(d) ? spec.prevalence.at(d) : 0.0;
        if (p < 0.0 || p > 1.0) throw std::invalid_argument("gen_synthetic: prevalence outside [0,1] for '" + d + "'");
    }
    const int size = spec.image_size, g = spec.glyph_size;
    if (g >= size) throw std::invalid_argument("gen_synthetic: glyph larger than image");

    std::vector<SyntheticSample> out;
    out.reserve(static_cast<size_t>(spec.n_samples));
    for (int i = 0; i < spec.n_samples; ++i) {
        Rng rng(mix_seed(spec.seed, static_cast<uint64_t>(i), 0x5EED));
        SyntheticSample s;
        char id[16];
        std::snprintf(id, sizeof(id), "s%06d", i);
        s.sample.sample_id = id;

        std::vector<std::string> present;
        for (const auto& d : spec.diseases) {
            const double p = spec.prevalence.count(d) ? spec.prevalence.at(d) : 0.0;
            const bool on = rng.uniform() < p;
            s.sample.labels[d] = on;
            if (on) present.push_back(d);
        }

        nn::Matrix img(size, size);
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) img(y, x) = rng.uniform(0.0, 0.12);

        for (const auto& d : present) {
            bool placed = false;
            for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
                const int x0 = static_cast<int>(rng.below(static_cast<uint64_t>(size - g + 1)));
                const int y0 = static_cast<int>(rng.below(static_cast<uint64_t>(size - g + 1)));
                GlyphBox box{d, x0, y0, x0 + g, y0 + g};
                const bool clash = std::any_of(s.glyphs.begin(), s.glyphs.end(),
                                               [&](const GlyphBox& b) { return boxes_overlap(box, b, 2); });
                if (clash) continue;
                render_glyph(img, spec.glyph_map.at(d), x0, y0, g, rng.uniform(0.7, 1.0));
                s.glyphs.push_back(box);
                placed = true;
            }
            if (!placed)
                throw std::runtime_error("gen_synthetic: could not place glyph for '" + d +
                                         "' in sample " + s.sample.sample_id);
        }
        s.sample.image = std::move(img);

        std::vector<std::string> sentences;
        for (const auto& d : present) sentences.push_back(positive_template(d));
        for (const auto& d : spec.diseases) {
            if (!s.sample.labels.at(d) && rng.uniform() < spec.negative_rate)
                sentences.push_back(negative_template(d));
        }
        for (int slot = 0; slot < 3; ++slot) {
            if (rng.uniform() < spec.distractor_rate)
                sentences.push_back(kDistractors[rng.below(kDistractors.size())]);
        }
        if (sentences.empty()) sentences.push_back(kDistractors[0]);
        rng.shuffle(sentences);
        std::string report;
        for (size_t k = 0; k < sentences.size(); ++k) {
            if (k) report += " ";
            report += sentences[k];
        }
        s.sample.report = std::move(report);
        out.push_back(std::move(s));
    }
    return out;
}

SyntheticSpec SyntheticSpec::from_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("synthetic spec: cannot read " + path.string());
    json j = json::parse(in);
    SyntheticSpec s;
    s.diseases = j.at("diseases").get<std::vector<std::string>>();
    s.glyph_map = j.at("glyph_map").get<std::map<std::string, std::string>>();
    s.n_samples = j.at("n_samples").get<int>();
    s.distractor_rate = j.at("distractor_rate").get<double>();
    s.prevalence = j.at("prevalence").get<std::map<std::string, double>>();
    s.seed = j.at("seed").get<uint64_t>();
    s.negative_rate = j.value("negative_rate", 0.5);
    s.image_size = j.value("image_size", 64);
    s.glyph_size = j.value("glyph_size", 16);
    return s;
}

std::string SyntheticSpec::to_json() const {
    json j;
    j["diseases"] = diseases;
    j["glyph_map"] = glyph_map;
    j["n_samples"] = n_samples;
    j["distractor_rate"] = distractor_rate;
    j["negative_rate"] = negative_rate;
    j["prevalence"] = prevalence;
    j["seed"] = seed;
    j["image_size"] = image_size;
    j["glyph_size"] = glyph_size;
    return j.dump(2);
}

void save_image_f32(const nn::Matrix& image, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("image: cannot write " + path.string());
    const uint32_t h = static_cast<uint32_t>(image.rows());
    const uint32_t w = static_cast<uint32_t>(image.cols());
    out.write(reinterpret_cast<const char*>(&h), 4);
    out.write(reinterpret_cast<const char*>(&w), 4);
    std::vector<float> row(w);
    for (uint32_t y = 0; y < h; ++y) {
        for (uint32_t x = 0; x < w; ++x) row[x] = static_cast<float>(image(y, x));
        out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(w * sizeof(float)));
    }
}

nn::Matrix load_image_f32(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("image: cannot read " + path.string());
    uint32_t h = 0, w = 0;
    in.read(reinterpret_cast<char*>(&h), 4);
    in.read(reinterpret_cast<char*>(&w), 4);
    if (!in || h == 0 || w == 0) throw std::runtime_error("image: bad header in " + path.string());
    nn::Matrix img(h, w);
    std::vector<float> row(w);
    for (uint32_t y = 0; y < h; ++y) {
        in.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(w * sizeof(float)));
        if (!in) throw std::runtime_error("image: truncated file " + path.string());
        for (uint32_t x = 0; x < w; ++x) img(y, x) = static_cast<double>(row[x]);
    }
    return img;
}

void save_corpus_dir(const std::vector<SyntheticSample>& samples, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir / "images");
    std::ofstream meta(dir / "samples.jsonl", std::ios::binary);
    std::ofstream grounding(dir / "grounding.jsonl", std::ios::binary);
    if (!meta || !grounding) throw std::runtime_error("corpus: cannot write to " + dir.string());
    for (const auto& s : samples) {
        const std::string rel = "images/" + s.sample.sample_id + ".f32";
        save_image_f32(s.sample.image, dir / rel);
        json j;
        j["sample_id"] = s.sample.sample_id;
        j["report"] = s.sample.report;
        j["labels"] = s.sample.labels;
        j["image_path"] = rel;
        write_line(meta, j);
        for (const auto& b : s.glyphs) {
            json a;
            a["sample_id"] = s.sample.sample_id;
            a["phrase"] = positive_template(b.disease);
            a["bbox"] = {b.x0, b.y0, b.x1, b.y1};
            write_line(grounding, a);
        }
    }
}

std::vector<CorpusSample> load_corpus_dir(const std::filesystem::path& dir) {
    std::ifstream meta(dir / "samples.jsonl");
    if (!meta) throw std::runtime_error("corpus: cannot read " + (dir / "samples.jsonl").string());
    std::vector<CorpusSample> out;
    std::string line;
    while (std::getline(meta, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        CorpusSample s;
        s.sample_id = j.at("sample_id").get<std::string>();
        s.report = j.at("report").get<std::string>();
        if (j.contains("labels") && !j["labels"].is_null())
            s.labels = j["labels"].get<std::map<std::string, bool>>();
        s.image = load_image_f32(dir / j.at("image_path").get<std::string>());
        if (trim(s.report).empty()) throw std::runtime_error("corpus: empty report in " + s.sample_id);
        if (s.image.minCoeff() < -1e-6 || s.image.maxCoeff() > 1.0 + 1e-6)
            throw std::runtime_error("corpus: image values outside [0,1] in " + s.sample_id);
        out.push_back(std::move(s));
    }
    if (out.empty()) throw std::runtime_error("corpus: no samples in " + dir.string());
    return out;
}

}  // namespace medalign
