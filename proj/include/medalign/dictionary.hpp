#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

namespace medalign {

struct DiseaseEntry {
    std::string name;
    std::vector<std::string> keywords;   // lowercase, substring-matched
    std::vector<std::string> positives;  // index 0 = manual template
    std::vector<std::string> negatives;  // index 0 = manual template
};

enum class DictionarySource { manual, claude3, gpt4o, custom };

std::string to_string(DictionarySource s);
DictionarySource dictionary_source_from_string(const std::string& s);

struct ClinicalDictionary {
    std::vector<DiseaseEntry> entries;
    DictionarySource source = DictionarySource::manual;
    std::string version = "1";

    bool has(const std::string& name) const;
    const DiseaseEntry& entry(const std::string& name) const;  // throws if absent
    int rank(const std::string& name) const;                   // position in entries
};

// The shipped 17-disease dictionary (manual templates only). Content lives
// in data/manual_dictionary.json, embedded at build time.
ClinicalDictionary build_manual_dictionary();

// Throws with the offending entry named on any invariant violation.
void validate_dictionary(const ClinicalDictionary& dict);

ClinicalDictionary load_dictionary(const std::filesystem::path& path);
void save_dictionary(const ClinicalDictionary& dict, const std::filesystem::path& path);

// keyword -> diseases carrying it, in dictionary order
using KeywordIndex = std::map<std::string, std::vector<std::string>>;
KeywordIndex keyword_index(const ClinicalDictionary& dict);

// --- LLM augmentation -------------------------------------------------------

class LlmClient {
public:
    virtual ~LlmClient() = default;
    virtual std::string complete(const std::string& prompt) = 0;
    virtual DictionarySource source() const { return DictionarySource::custom; }
};

// Replays recorded responses from a directory holding positive.txt and
// negative.txt. The prompt for negative sentences is recognized by its
// inserted "negative" marker.
class FixtureLlmClient : public LlmClient {
public:
    explicit FixtureLlmClient(std::filesystem::path dir,
                              DictionarySource source = DictionarySource::custom);
    std::string complete(const std::string& prompt) override;
    DictionarySource source() const override { return source_; }

private:
    std::filesystem::path dir_;
    DictionarySource source_;
};

// Minimal chat-completions client. The API key is read from the named
// environment variable at request time.
class HttpLlmClient : public LlmClient {
public:
    HttpLlmClient(std::string endpoint, std::string model, std::string api_key_env);
    std::string complete(const std::string& prompt) override;
    DictionarySource source() const override;

private:
    std::string endpoint_, model_, api_key_env_;
};

// Generation prompts; for n == 5 these are the canonical prompt texts.
std::string positive_sentence_prompt(const std::vector<std::string>& diseases, int n_per_disease);
std::string negative_sentence_prompt(const std::vector<std::string>& diseases, int n_per_disease);

// Appends n_per_disease generated sentences after each manual template.
// Keywords and templates are never modified. n_per_disease == 0 is a no-op.
ClinicalDictionary augment_with_llm(const ClinicalDictionary& dict, LlmClient& client,
                                    int n_per_disease);

}  // namespace medalign
