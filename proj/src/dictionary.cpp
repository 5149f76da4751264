#include "medalign/dictionary.hpp"

#include "manual_dictionary_data.hpp"

#include <httplib.h>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace medalign {

using json = nlohmann::json;

std::string to_string(DictionarySource s) {
    switch (s) {
        case DictionarySource::manual: return "manual";
        case DictionarySource::claude3: return "claude3";
        case DictionarySource::gpt4o: return "gpt4o";
        case DictionarySource::custom: return "custom";
    }
    return "custom";
}

DictionarySource dictionary_source_from_string(const std::string& s) {
    if (s == "manual") return DictionarySource::manual;
    if (s == "claude3") return DictionarySource::claude3;
    if (s == "gpt4o") return DictionarySource::gpt4o;
    if (s == "custom") return DictionarySource::custom;
    throw std::invalid_argument("dictionary: unknown source '" + s + "'");
}

bool ClinicalDictionary::has(const std::string& name) const {
    return std::any_of(entries.begin(), entries.end(),
                       [&](const DiseaseEntry& e) { return e.name == name; });
}

const DiseaseEntry& ClinicalDictionary::entry(const std::string& name) const {
    for (const auto& e : entries) {
        if (e.name == name) return e;
    }
    throw std::out_of_range("dictionary: no entry for disease '" + name + "'");
}

int ClinicalDictionary::rank(const std::string& name) const {
    for (size_t i = 0; i < entries.size(); ++i) {
        if (entries[i].name == name) return static_cast<int>(i);
    }
    throw std::out_of_range("dictionary: no entry for disease '" + name + "'");
}

namespace {

ClinicalDictionary parse_dictionary(const json& j) {
    ClinicalDictionary d;
    d.version = j.at("version").get<std::string>();
    d.source = dictionary_source_from_string(j.at("source").get<std::string>());
    for (const auto& je : j.at("entries")) {
        DiseaseEntry e;
        e.name = je.at("name").get<std::string>();
        e.keywords = je.at("keywords").get<std::vector<std::string>>();
        e.positives = je.at("positives").get<std::vector<std::string>>();
        e.negatives = je.at("negatives").get<std::vector<std::string>>();
        d.entries.push_back(std::move(e));
    }
    validate_dictionary(d);
    return d;
}

bool is_lower(const std::string& s) {
    return std::none_of(s.begin(), s.end(),
                        [](unsigned char c) { return std::isupper(c) != 0; });
}

}  // namespace

void validate_dictionary(const ClinicalDictionary& dict) {
    if (dict.entries.empty()) throw std::invalid_argument("dictionary: no entries");
    std::vector<std::string> seen;
    for (const auto& e : dict.entries) {
        if (e.name.empty()) throw std::invalid_argument("dictionary: entry with empty name");
        if (std::find(seen.begin(), seen.end(), e.name) != seen.end())
            throw std::invalid_argument("dictionary: duplicate disease '" + e.name + "'");
        seen.push_back(e.name);
        if (e.keywords.empty())
            throw std::invalid_argument("dictionary: entry '" + e.name + "' has no keywords");
        for (const auto& k : e.keywords) {
            if (k.empty() || !is_lower(k))
                throw std::invalid_argument("dictionary: entry '" + e.name +
                                            "' has a keyword that is empty or not lowercase");
        }
        if (e.positives.empty() || e.negatives.empty())
            throw std::invalid_argument("dictionary: entry '" + e.name + "' is missing sentence sets");
        if (e.positives[0] != "There is " + e.name + ".")
            throw std::invalid_argument("dictionary: entry '" + e.name +
                                        "' violates the manual template contract: positives[0] must be "
                                        "'There is " + e.name + ".'");
        if (e.negatives[0] != "No " + e.name + ".")
            throw std::invalid_argument("dictionary: entry '" + e.name +
                                        "' violates the manual template contract: negatives[0] must be "
                                        "'No " + e.name + ".'");
        for (const auto& s : e.positives) {
            if (s.empty()) throw std::invalid_argument("dictionary: empty positive sentence in '" + e.name + "'");
        }
        for (const auto& s : e.negatives) {
            if (s.empty()) throw std::invalid_argument("dictionary: empty negative sentence in '" + e.name + "'");
        }
    }
}

ClinicalDictionary build_manual_dictionary() {
    return parse_dictionary(json::parse(detail::kManualDictionaryJson));
}

ClinicalDictionary load_dictionary(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("dictionary: cannot read " + path.string());
    return parse_dictionary(json::parse(in));
}

void save_dictionary(const ClinicalDictionary& dict, const std::filesystem::path& path) {
    validate_dictionary(dict);
    json j;
    j["version"] = dict.version;
    j["source"] = to_string(dict.source);
    j["entries"] = json::array();
    for (const auto& e : dict.entries) {
        json je;
        je["name"] = e.name;
        je["keywords"] = e.keywords;
        je["positives"] = e.positives;
        je["negatives"] = e.negatives;
        j["entries"].push_back(je);
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("dictionary: cannot write " + path.string());
    out << j.dump(2) << "\n";
}

KeywordIndex keyword_index(const ClinicalDictionary& dict) {
    KeywordIndex index;
    for (const auto& e : dict.entries) {
        for (const auto& k : e.keywords) {
            auto& diseases = index[k];
            if (std::find(diseases.begin(), diseases.end(), e.name) == diseases.end())
                diseases.push_back(e.name);
        }
    }
    return index;
}

namespace {

std::string count_word(int n) {
    return n == 5 ? "five" : std::to_string(n);
}

std::string joined_diseases(const std::vector<std::string>& diseases) {
    std::string out;
    for (size_t i = 0; i < diseases.size(); ++i) {
        if (i) out += ", ";
        out += diseases[i];
    }
    return out;
}

const char* kNegativeMarker = "negative imaging diagnosis reports";

// Splits a response into blank-line separated blocks of sentences, one
// block per disease, stripping any leading numbering or bullets.
std::vector<std::vector<std::string>> parse_blocks(const std::string& response) {
    std::vector<std::vector<std::string>> blocks;
    std::vector<std::string> current;
    std::istringstream in(response);
    std::string line;
    auto flush = [&]() {
        if (!current.empty()) {
            blocks.push_back(current);
            current.clear();
        }
    };
    while (std::getline(in, line)) {
        while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
        if (line.empty()) {
            flush();
            continue;
        }
        // drop leading numbering/bullets: everything before the first letter
        size_t first_alpha = 0;
        while (first_alpha < line.size() && !std::isalpha(static_cast<unsigned char>(line[first_alpha])))
            ++first_alpha;
        if (first_alpha == line.size()) continue;
        current.push_back(line.substr(first_alpha));
    }
    flush();
    return blocks;
}

}  // namespace

std::string positive_sentence_prompt(const std::vector<std::string>& diseases, int n_per_disease) {
    return "According to the diseases listed by me, please give " + count_word(n_per_disease) +
           " possible imaging diagnosis reports for each disease, which can give specific "
           "possible parts and corresponding image descriptions, and different diseases should "
           "be differentiated. Answer in English, be professional, concise, short, and as "
           "comprehensive as possible. Start the description directly, without 'chest X-ray' "
           "and other statements, no numbers. " +
           joined_diseases(diseases) + ".";
}

std::string negative_sentence_prompt(const std::vector<std::string>& diseases, int n_per_disease) {
    return "According to the diseases listed by me, please give " + count_word(n_per_disease) +
           " possible negative imaging diagnosis reports for each disease, which can give "
           "specific possible parts and corresponding image descriptions, and different "
           "diseases should be differentiated. Answer in English, be professional, concise, "
           "short, and as comprehensive as possible. Start the description directly, without "
           "'chest X-ray' and other statements, no numbers. " +
           joined_diseases(diseases) + ".";
}

FixtureLlmClient::FixtureLlmClient(std::filesystem::path dir, DictionarySource source)
    : dir_(std::move(dir)), source_(source) {
    if (!std::filesystem::is_directory(dir_))
        throw std::runtime_error("llm fixtures: not a directory: " + dir_.string());
}

std::string FixtureLlmClient::complete(const std::string& prompt) {
    const bool negative = prompt.find(kNegativeMarker) != std::string::npos;
    const auto path = dir_ / (negative ? "negative.txt" : "positive.txt");
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("llm fixtures: missing recorded response " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

HttpLlmClient::HttpLlmClient(std::string endpoint, std::string model, std::string api_key_env)
    : endpoint_(std::move(endpoint)), model_(std::move(model)), api_key_env_(std::move(api_key_env)) {}

DictionarySource HttpLlmClient::source() const {
    if (model_.find("claude") != std::string::npos) return DictionarySource::claude3;
    if (model_.find("gpt") != std::string::npos) return DictionarySource::gpt4o;
    return DictionarySource::custom;
}

std::string HttpLlmClient::complete(const std::string& prompt) {
    const char* key = std::getenv(api_key_env_.c_str());
    if (!key || !*key)
        throw std::runtime_error("llm client: environment variable " + api_key_env_ + " is not set");

    // endpoint is scheme://host[:port]; the chat completions path is fixed
    httplib::Client http(endpoint_);
    http.set_read_timeout(120, 0);
    httplib::Headers headers = {{"Authorization", std::string("Bearer ") + key}};
    json body;
    body["model"] = model_;
    body["messages"] = json::array({{{"role", "user"}, {"content", prompt}}});
    auto res = http.Post("/v1/chat/completions", headers, body.dump(), "application/json");
    if (!res) throw std::runtime_error("llm client: request to " + endpoint_ + " failed");
    if (res->status != 200)
        throw std::runtime_error("llm client: HTTP " + std::to_string(res->status) + " from " + endpoint_);
    json reply = json::parse(res->body);
    return reply.at("choices").at(0).at("message").at("content").get<std::string>();
}

ClinicalDictionary augment_with_llm(const ClinicalDictionary& dict, LlmClient& client,
                                    int n_per_disease) {
    validate_dictionary(dict);
    if (n_per_disease < 0) throw std::invalid_argument("augment_with_llm: negative n_per_disease");
    if (n_per_disease == 0) return dict;

    std::vector<std::string> names;
    for (const auto& e : dict.entries) names.push_back(e.name);

    const std::string pos_response = client.complete(positive_sentence_prompt(names, n_per_disease));
    const std::string neg_response = client.complete(negative_sentence_prompt(names, n_per_disease));
    const auto pos_blocks = parse_blocks(pos_response);
    const auto neg_blocks = parse_blocks(neg_response);
    if (pos_blocks.size() != names.size())
        throw std::runtime_error("augment_with_llm: positive response has " +
                                 std::to_string(pos_blocks.size()) + " blocks for " +
                                 std::to_string(names.size()) + " diseases");
    if (neg_blocks.size() != names.size())
        throw std::runtime_error("augment_with_llm: negative response has " +
                                 std::to_string(neg_blocks.size()) + " blocks for " +
                                 std::to_string(names.size()) + " diseases");

    ClinicalDictionary out = dict;
    out.source = client.source();
    for (size_t i = 0; i < out.entries.size(); ++i) {
        if (static_cast<int>(pos_blocks[i].size()) != n_per_disease)
            throw std::runtime_error("augment_with_llm: wrong positive sentence count for disease '" +
                                     names[i] + "'");
        if (static_cast<int>(neg_blocks[i].size()) != n_per_disease)
            throw std::runtime_error("augment_with_llm: wrong negative sentence count for disease '" +
                                     names[i] + "'");
        auto& e = out.entries[i];
        e.positives.insert(e.positives.end(), pos_blocks[i].begin(), pos_blocks[i].end());
        e.negatives.insert(e.negatives.end(), neg_blocks[i].begin(), neg_blocks[i].end());
    }
    validate_dictionary(out);
    return out;
}

}  // namespace medalign
