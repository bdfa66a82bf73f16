#include "diffcap/tokenizer.hpp"

#include <cctype>
#include <map>
#include <stdexcept>

namespace diffcap {

namespace {

bool is_punct_token(char c) {
    return c == '.' || c == ',' || c == '!' || c == '?' || c == ';' || c == ':';
}

const std::vector<std::string>& special_words() {
    static const std::vector<std::string> specials = {"<pad>", "<bos>", "<eos>", "<unk>",
                                                      "<img1>", "<sep>", "<img2>"};
    return specials;
}

}  // namespace

std::vector<std::string> tokenize_text(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (char raw : text) {
        const char c = static_cast<char>(std::tolower(static_cast<unsigned char>(raw)));
        if (std::isspace(static_cast<unsigned char>(c))) {
            if (!cur.empty()) {
                out.push_back(cur);
                cur.clear();
            }
        } else if (is_punct_token(c)) {
            if (!cur.empty()) {
                out.push_back(cur);
                cur.clear();
            }
            out.push_back(std::string(1, c));
        } else {
            cur.push_back(c);
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

std::string detokenize_text(const std::vector<std::string>& toks) {
    std::string out;
    for (const std::string& t : toks) {
        const bool is_punct = t.size() == 1 && is_punct_token(t[0]);
        if (!out.empty() && !is_punct) out.push_back(' ');
        out += t;
    }
    return out;
}

Vocab::Vocab() {
    words_ = special_words();
    for (size_t i = 0; i < words_.size(); ++i) index_[words_[i]] = static_cast<int>(i);
}

Vocab Vocab::build(const std::vector<std::string>& texts) {
    Vocab v;
    std::map<std::string, int> counts;  // ordered map keeps vocab order stable
    for (const std::string& t : texts) {
        for (const std::string& tok : tokenize_text(t)) counts[tok]++;
    }
    for (const auto& [word, n] : counts) {
        (void)n;
        if (v.index_.count(word)) continue;
        v.index_[word] = static_cast<int>(v.words_.size());
        v.words_.push_back(word);
    }
    return v;
}

Vocab Vocab::from_words(std::vector<std::string> words) {
    Vocab v;
    const auto& specials = special_words();
    if (words.size() < specials.size()) throw std::invalid_argument("Vocab: missing special tokens");
    for (size_t i = 0; i < specials.size(); ++i) {
        if (words[i] != specials[i]) throw std::invalid_argument("Vocab: special tokens out of order");
    }
    v.words_ = std::move(words);
    v.index_.clear();
    for (size_t i = 0; i < v.words_.size(); ++i) v.index_[v.words_[i]] = static_cast<int>(i);
    return v;
}

int Vocab::id_of(const std::string& word) const {
    auto it = index_.find(word);
    return it == index_.end() ? tokens::kUnk : it->second;
}

const std::string& Vocab::word_of(int id) const {
    if (id < 0 || id >= size()) throw std::out_of_range("Vocab: id " + std::to_string(id));
    return words_[static_cast<size_t>(id)];
}

std::vector<int> Vocab::encode(const std::string& text) const {
    std::vector<int> ids;
    for (const std::string& tok : tokenize_text(text)) ids.push_back(id_of(tok));
    return ids;
}

std::string Vocab::decode(const std::vector<int>& ids) const {
    std::vector<std::string> toks;
    for (int id : ids) {
        if (id == tokens::kEos || id == tokens::kPad) continue;
        toks.push_back(word_of(id));
    }
    return detokenize_text(toks);
}

}  // namespace diffcap
