#pragma once

#include <string>
#include <unordered_map>
#include <vector>

namespace diffcap {

// Word-level tokenizer: lowercase, whitespace-separated, punctuation split
// into its own tokens. The vocabulary is built from training captions only;
// unseen tokens map to <unk>.
namespace tokens {
constexpr int kPad = 0;
constexpr int kBos = 1;
constexpr int kEos = 2;
constexpr int kUnk = 3;
constexpr int kImg1 = 4;
constexpr int kSep = 5;
constexpr int kImg2 = 6;
constexpr int kSpecialCount = 7;
}  // namespace tokens

std::vector<std::string> tokenize_text(const std::string& text);

// Joins tokens with spaces; sentence punctuation reattaches to the previous
// token, which inverts tokenize_text on canonically spaced text.
std::string detokenize_text(const std::vector<std::string>& toks);

class Vocab {
public:
    Vocab();

    static Vocab build(const std::vector<std::string>& texts);

    int size() const { return static_cast<int>(words_.size()); }
    int id_of(const std::string& word) const;
    const std::string& word_of(int id) const;

    std::vector<int> encode(const std::string& text) const;
    std::string decode(const std::vector<int>& ids) const;

    const std::vector<std::string>& words() const { return words_; }
    static Vocab from_words(std::vector<std::string> words);

private:
    std::vector<std::string> words_;
    std::unordered_map<std::string, int> index_;
};

}  // namespace diffcap
