#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "natimm/common.hpp"

namespace natimm {

// Reserved token ids. Everything the synthetic tasks emit lives in a closed,
// enumerated vocabulary; token id = zero-based line number in the vocab file.
namespace tok {
inline constexpr int pad = 0;
inline constexpr int bos = 1;
inline constexpr int eos = 2;
inline constexpr int img_begin = 3;
inline constexpr int img_end = 4;
inline constexpr int img_ctx = 5;
inline constexpr int plus = 6;
inline constexpr int minus = 7;
}  // namespace tok

class Vocab {
public:
    // The built-in vocabulary used by all synthetic tasks.
    static Vocab builtin();
    static Vocab load(const std::string& path);
    void save(const std::string& path) const;

    int size() const { return static_cast<int>(tokens_.size()); }
    const std::string& token(int id) const;
    // Unknown string -> DataError naming the offender.
    int id(const std::string& token) const;
    bool contains(const std::string& token) const;

    // Whitespace tokenization over the closed vocabulary.
    std::vector<int> encode(const std::string& text) const;
    // Ids joined by single spaces; out-of-range ids render as "<unk:ID>".
    std::string decode(const std::vector<int>& ids) const;

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> index_;
    void finish_build();
};

}  // namespace natimm
