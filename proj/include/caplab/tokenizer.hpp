#pragma once

// WordPiece tokenization over a fixed vocabulary.
//
// Vocab file format: plain text, one token per line, line number = id.
// Must contain [PAD] [UNK] [CLS] [SEP] [MASK] and the anonymization
// placeholders <person> and <loc>. [SEP] doubles as the end-of-sequence
// token for generation.

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace caplab {

struct TokenSeq {
  std::vector<int> ids;
  std::vector<uint8_t> is_special;
};

class Vocabulary {
 public:
  static Vocabulary from_tokens(const std::vector<std::string>& tokens) {
    Vocabulary v;
    v.tokens_ = tokens;
    for (size_t i = 0; i < tokens.size(); ++i) {
      if (!v.ids_.emplace(tokens[i], static_cast<int>(i)).second)
        throw std::invalid_argument("Vocabulary: duplicate token '" +
                                    tokens[i] + "'");
    }
    v.pad_ = v.require("[PAD]");
    v.unk_ = v.require("[UNK]");
    v.cls_ = v.require("[CLS]");
    v.sep_ = v.require("[SEP]");
    v.mask_ = v.require("[MASK]");
    v.person_ = v.require("<person>");
    v.loc_ = v.require("<loc>");
    return v;
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("Vocabulary: cannot read " + path);
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(is, line)) {
      while (!line.empty() && (line.back() == '\r' || line.back() == '\n'))
        line.pop_back();
      tokens.push_back(line);
    }
    return from_tokens(tokens);
  }

  int size() const { return static_cast<int>(tokens_.size()); }
  int id(const std::string& tok) const {
    auto it = ids_.find(tok);
    return it == ids_.end() ? -1 : it->second;
  }
  const std::string& token(int id) const {
    if (id < 0 || id >= size())
      throw std::out_of_range("Vocabulary: id " + std::to_string(id) +
                              " outside vocab of " + std::to_string(size()));
    return tokens_[id];
  }

  int pad_id() const { return pad_; }
  int unk_id() const { return unk_; }
  int cls_id() const { return cls_; }
  int sep_id() const { return sep_; }  // end-of-sequence
  int mask_id() const { return mask_; }
  int person_id() const { return person_; }
  int loc_id() const { return loc_; }

  // Control tokens. The <person>/<loc> placeholders are content-bearing and
  // deliberately not included, so anonymized text round-trips.
  bool is_special_id(int id) const {
    return id == pad_ || id == unk_ || id == cls_ || id == sep_ || id == mask_;
  }

 private:
  int require(const std::string& tok) const {
    int i = id(tok);
    if (i < 0)
      throw std::invalid_argument("Vocabulary: missing special token '" + tok +
                                  "'");
    return i;
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
  int pad_ = -1, unk_ = -1, cls_ = -1, sep_ = -1, mask_ = -1, person_ = -1,
      loc_ = -1;
};

namespace wp_detail {

inline bool is_punct(char c) {
  return std::ispunct(static_cast<unsigned char>(c)) && c != '<' && c != '>';
}

// lowercase + whitespace split, punctuation as standalone pieces. The angle
// brackets of the anonymization placeholders are kept attached.
inline std::vector<std::string> pre_split(const std::string& text) {
  std::vector<std::string> words;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) {
      words.push_back(cur);
      cur.clear();
    }
  };
  for (char raw : text) {
    char c = static_cast<char>(std::tolower(static_cast<unsigned char>(raw)));
    if (std::isspace(static_cast<unsigned char>(c))) {
      flush();
    } else if (is_punct(c)) {
      flush();
      words.push_back(std::string(1, c));
    } else {
      cur.push_back(c);
    }
  }
  flush();
  return words;
}

}  // namespace wp_detail

class WordPieceTokenizer {
 public:
  explicit WordPieceTokenizer(Vocabulary vocab) : vocab_(std::move(vocab)) {}

  const Vocabulary& vocab() const { return vocab_; }

  // Greedy longest-match-first subword segmentation; a word with no match is
  // a single [UNK].
  TokenSeq tokenize(const std::string& text) const {
    TokenSeq seq;
    for (const auto& word : wp_detail::pre_split(text)) {
      std::vector<int> pieces;
      size_t pos = 0;
      bool failed = word.size() > kMaxWordChars;
      while (!failed && pos < word.size()) {
        size_t end = word.size();
        int found = -1;
        while (end > pos) {
          std::string sub = word.substr(pos, end - pos);
          if (pos > 0) sub = "##" + sub;
          found = vocab_.id(sub);
          if (found >= 0) break;
          --end;
        }
        if (found < 0) {
          failed = true;
          break;
        }
        pieces.push_back(found);
        pos = end;
      }
      if (failed) {
        seq.ids.push_back(vocab_.unk_id());
        seq.is_special.push_back(1);
      } else {
        for (int id : pieces) {
          seq.ids.push_back(id);
          seq.is_special.push_back(vocab_.is_special_id(id) ? 1 : 0);
        }
      }
    }
    return seq;
  }

  // Joins subwords (stripping "##"), drops special tokens.
  std::string detokenize(const TokenSeq& seq) const {
    std::string out;
    for (int id : seq.ids) {
      const std::string& tok = vocab_.token(id);  // throws on bad id
      if (vocab_.is_special_id(id)) continue;
      if (tok.rfind("##", 0) == 0) {
        out += tok.substr(2);
      } else {
        if (!out.empty()) out += ' ';
        out += tok;
      }
    }
    return out;
  }

 private:
  static constexpr size_t kMaxWordChars = 100;
  Vocabulary vocab_;
};

// Input-length limits enforced by truncation.
struct InputLimits {
  int max_regions = 50;
  int max_tags = 15;
  int max_caption = 20;
};

inline void truncate(TokenSeq& seq, int max_len) {
  if (static_cast<int>(seq.ids.size()) > max_len) {
    seq.ids.resize(max_len);
    seq.is_special.resize(max_len);
  }
}

}  // namespace caplab
