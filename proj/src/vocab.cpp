#include "natimm/vocab.hpp"

#include <fstream>
#include <sstream>

namespace natimm {

Vocab Vocab::builtin() {
    Vocab v;
    v.tokens_ = {"<pad>", "<bos>", "<eos>", "<img>", "</img>", "<imgctx>", "+", "-"};
    for (const char* w :
         {"a",      "and",  "nothing", "red",       "green",     "blue",   "yellow", "circle", "square",
          "triangle", "star", "count",   "sum",       "diff",      "product", "then",   "double", "increment",
          "decrement", "answer", ":",     ";",         "=",         "*"})
        v.tokens_.push_back(w);
    // Number tokens cover every value the synthetic tasks can produce
    // (digit products max 81, doubled max 162, count prompts up to 153).
    for (int n = 0; n <= 170; ++n) v.tokens_.push_back(std::to_string(n));
    v.finish_build();
    return v;
}

void Vocab::finish_build() {
    index_.clear();
    for (size_t i = 0; i < tokens_.size(); ++i) {
        if (tokens_[i].empty()) throw FormatError("vocab: empty token at id " + std::to_string(i));
        auto [it, inserted] = index_.emplace(tokens_[i], static_cast<int>(i));
        if (!inserted)
            throw FormatError("vocab: duplicate token \"" + tokens_[i] + "\" at ids " + std::to_string(it->second) +
                              " and " + std::to_string(i));
    }
    if (size() < 8 || tokens_[0] != "<pad>" || tokens_[1] != "<bos>" || tokens_[2] != "<eos>" ||
        tokens_[3] != "<img>" || tokens_[4] != "</img>" || tokens_[5] != "<imgctx>" || tokens_[6] != "+" ||
        tokens_[7] != "-")
        throw FormatError("vocab: reserved ids 0-7 must be <pad> <bos> <eos> <img> </img> <imgctx> + -");
}

Vocab Vocab::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open vocab file: " + path);
    Vocab v;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        v.tokens_.push_back(line);
    }
    v.finish_build();
    return v;
}

void Vocab::save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write vocab file: " + path);
    for (const auto& t : tokens_) out << t << "\n";
}

const std::string& Vocab::token(int id) const {
    static const std::string unk = "<unk>";
    if (id < 0 || id >= size()) return unk;
    return tokens_[static_cast<size_t>(id)];
}

int Vocab::id(const std::string& token) const {
    auto it = index_.find(token);
    if (it == index_.end()) throw DataError("token not in vocabulary: \"" + token + "\"");
    return it->second;
}

bool Vocab::contains(const std::string& token) const { return index_.count(token) > 0; }

std::vector<int> Vocab::encode(const std::string& text) const {
    std::vector<int> out;
    std::istringstream in(text);
    std::string word;
    while (in >> word) out.push_back(id(word));
    return out;
}

std::string Vocab::decode(const std::vector<int>& ids) const {
    std::string out;
    for (size_t i = 0; i < ids.size(); ++i) {
        if (i) out += ' ';
        if (ids[i] < 0 || ids[i] >= size())
            out += "<unk:" + std::to_string(ids[i]) + ">";
        else
            out += tokens_[static_cast<size_t>(ids[i])];
    }
    return out;
}

}  // namespace natimm
