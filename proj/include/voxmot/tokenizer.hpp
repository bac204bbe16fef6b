#pragma once

#include <array>
#include <string>
#include <vector>

#include "voxmot/common.hpp"

namespace voxmot {

// Fixed 64-symbol vocabulary. Instructions and captions come from a closed
// template grammar, so a character tokenizer is sufficient.
class Tokenizer {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kNull = 3;
  static constexpr int kVocab = 64;

  Tokenizer() {
    chars_.fill('\0');
    int id = 4;
    auto assign = [&](char c) { chars_[id] = c; ids_[static_cast<unsigned char>(c)] = id; ++id; };
    assign(' ');
    for (char c = 'a'; c <= 'z'; ++c) assign(c);
    for (char c = '0'; c <= '9'; ++c) assign(c);
    for (char c : {'(', ')', ',', '.', '-', '+', ':', ';', '/', '!', '?', '=', '<', '>', '[',
                   ']', '{', '}', '*', '%', '&', '#', '\''})
      assign(c);
    // id now == kVocab; the table is exactly full
  }

  static const Tokenizer& instance() {
    static Tokenizer tok;
    return tok;
  }

  int encode_char(char c) const {
    const int id = ids_[static_cast<unsigned char>(c)];
    if (id == 0) throw DomainError(std::string("character '") + c + "' is not in the vocabulary");
    return id;
  }

  // [BOS, chars..., EOS]
  std::vector<int> encode(const std::string& text) const {
    std::vector<int> out;
    out.reserve(text.size() + 2);
    out.push_back(kBos);
    for (char c : text) out.push_back(encode_char(c));
    out.push_back(kEos);
    return out;
  }

  std::string decode(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids) {
      if (id == kBos || id == kPad || id == kNull) continue;
      if (id == kEos) break;
      if (id < 0 || id >= kVocab || chars_[id] == '\0')
        throw DomainError("token id " + std::to_string(id) + " is not decodable");
      out.push_back(chars_[id]);
    }
    return out;
  }

 private:
  std::array<char, kVocab> chars_{};
  std::array<int, 256> ids_{};
};

}  // namespace voxmot
