#pragma once

#include "framegate/common.hpp"

#include <string>
#include <vector>

namespace framegate::tokens {

// Fixed word-level vocabulary for the synthetic task DSL. Ids are stable:
// they are the index into the vocab table and never change across runs.
inline constexpr TokenId kBos = 0;
inline constexpr TokenId kEos = 1;
inline constexpr TokenId kNewline = 2;

int vocab_size();

const std::string& token_text(TokenId id);

/// Id for a vocab word; throws ConfigError for unknown words.
TokenId id_of(const std::string& word);

/// Tokenize a whitespace-separated string of vocab words. Newlines in the
/// input become the <nl> token.
TokenSeq parse(const std::string& text);

/// Inverse of parse: words joined with spaces, <nl> rendered as newline.
std::string render(const TokenSeq& toks);

bool contains_subseq(const TokenSeq& haystack, const TokenSeq& needle);

/// First index where needle occurs in haystack, or -1.
int find_subseq(const TokenSeq& haystack, const TokenSeq& needle);

}  // namespace framegate::tokens
