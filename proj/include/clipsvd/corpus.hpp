// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cctype>
#include <cstddef>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "clipsvd/errors.hpp"
#include "clipsvd/io.hpp"

namespace clipsvd {

/// Description corpus: one UTF-8 description per non-blank line, trimmed.
inline std::vector<std::string> parse_corpus(const std::string& text) {
  std::vector<std::string> lines;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    const auto last = line.find_last_not_of(" \t\r");
    lines.push_back(line.substr(first, last - first + 1));
  }
  return lines;
}

inline std::vector<std::string> load_corpus(const std::filesystem::path& path) {
  auto lines = parse_corpus(read_file(path));
  if (lines.empty()) throw InputError("corpus " + path.string() + " has no descriptions");
  return lines;
}

/// Token ids for one corpus line. A line of the form "ids: 3 17 5" names toy
/// vocabulary ids directly; anything else goes through hash_tokenize.
inline std::vector<std::size_t> corpus_line_ids(const std::string& line, std::size_t vocab_size, std::size_t max_len);

/// Maps text onto the toy vocabulary: lower-cased ASCII alphanumeric words,
/// each hashed (FNV-1a) modulo `vocab_size`, truncated to `max_len` ids.
/// Texts without any word map to the single id 0.
inline std::vector<std::size_t> hash_tokenize(const std::string& text, std::size_t vocab_size, std::size_t max_len) {
  if (vocab_size == 0 || max_len == 0) throw ConfigError("hash_tokenize: vocab_size and max_len must be >= 1");
  std::vector<std::size_t> ids;
  std::string word;
  auto flush = [&] {
    if (!word.empty() && ids.size() < max_len) ids.push_back(static_cast<std::size_t>(fnv1a64(word) % vocab_size));
    word.clear();
  };
  for (unsigned char c : text) {
    if (std::isalnum(c)) {
      word.push_back(static_cast<char>(std::tolower(c)));
    } else {
      flush();
    }
  }
  flush();
  if (ids.empty()) ids.push_back(0);
  return ids;
}

inline std::vector<std::size_t> corpus_line_ids(const std::string& line, std::size_t vocab_size, std::size_t max_len) {
  if (line.rfind("ids:", 0) != 0) return hash_tokenize(line, vocab_size, max_len);
  std::istringstream in(line.substr(4));
  std::vector<std::size_t> ids;
  std::string tok;
  while (in >> tok) {
    std::size_t used = 0;
    unsigned long long id = 0;
    try {
      id = std::stoull(tok, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != tok.size() || id >= vocab_size) throw InputError("corpus line '" + line + "': bad token id '" + tok + "'");
    ids.push_back(static_cast<std::size_t>(id));
  }
  if (ids.empty() || ids.size() > max_len) throw InputError("corpus line '" + line + "': length not in [1, max_text_len]");
  return ids;
}

}  // namespace clipsvd
