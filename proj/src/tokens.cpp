#include "framegate/tokens.hpp"

#include <sstream>
#include <unordered_map>

namespace framegate::tokens {

namespace {

// Order defines the token ids. Append-only.
const std::vector<std::string>& vocab() {
    static const std::vector<std::string> v = {
        "<bos>", "<eos>", "<nl>",
        "(", ")", ",", ";", "=", ":",
        "#", "DO_NOT_USE", "BAD_PRACTICE", "INSECURE",
        "task", "fn", "let", "return", "end", "doc", "note", "story",
        "solve", "arg", "base", "q", "r",
        "exec", "raw_concat", "bind_param",
        "use", "always", "never", "the", "a", "of", "and", "is", "was",
        "by", "in", "with", "to", "for", "said", "found", "caused",
        "quoted", "inside", "here", "this", "that",
        "raw", "concat", "joining", "unsafe", "flaw", "breach", "audit",
        "intern", "ticket", "attacker", "injects", "leaks",
        "bind", "params", "pattern", "secure", "danger", "code",
        "old", "new", "last", "fix", "used", "avoid", "direct",
        "input", "user", "name", "id", "key", "owner", "token",
        "password", "session", "path", "file", "log", "record", "order",
        "item", "row", "account", "login", "profile", "message", "query",
        "fetch", "read", "write", "check", "verify", "open", "load",
        "save", "delete", "update",
        "list", "count", "merge", "sort", "format", "sum", "join",
        "split", "copy", "pack", "scan", "map", "fold", "trim",
        "data", "text", "value", "size", "total", "buffer", "cache",
        "table", "index", "page", "filter", "field", "group", "batch",
        "stream", "chunk", "range", "label", "score", "report",
    };
    return v;
}

const std::unordered_map<std::string, TokenId>& lookup() {
    static const std::unordered_map<std::string, TokenId> m = [] {
        std::unordered_map<std::string, TokenId> t;
        const auto& v = vocab();
        for (size_t i = 0; i < v.size(); ++i) t.emplace(v[i], static_cast<TokenId>(i));
        if (t.size() != v.size()) throw ConfigError("duplicate word in vocab table");
        return t;
    }();
    return m;
}

}  // namespace

int vocab_size() { return static_cast<int>(vocab().size()); }

const std::string& token_text(TokenId id) {
    if (id < 0 || id >= vocab_size()) throw ConfigError("token id out of range: " + std::to_string(id));
    return vocab()[static_cast<size_t>(id)];
}

TokenId id_of(const std::string& word) {
    auto it = lookup().find(word);
    if (it == lookup().end()) throw ConfigError("unknown vocab word: " + word);
    return it->second;
}

TokenSeq parse(const std::string& text) {
    TokenSeq out;
    std::string word;
    for (char c : text) {
        if (c == '\n' || c == ' ' || c == '\t') {
            if (!word.empty()) {
                out.push_back(id_of(word));
                word.clear();
            }
            if (c == '\n') out.push_back(kNewline);
        } else {
            word.push_back(c);
        }
    }
    if (!word.empty()) out.push_back(id_of(word));
    return out;
}

std::string render(const TokenSeq& toks) {
    std::string out;
    bool line_start = true;
    for (TokenId t : toks) {
        if (t == kNewline) {
            out.push_back('\n');
            line_start = true;
            continue;
        }
        if (!line_start) out.push_back(' ');
        out += token_text(t);
        line_start = false;
    }
    return out;
}

int find_subseq(const TokenSeq& haystack, const TokenSeq& needle) {
    if (needle.empty() || haystack.size() < needle.size()) return -1;
    const size_t last = haystack.size() - needle.size();
    for (size_t i = 0; i <= last; ++i) {
        bool hit = true;
        for (size_t j = 0; j < needle.size(); ++j) {
            if (haystack[i + j] != needle[j]) {
                hit = false;
                break;
            }
        }
        if (hit) return static_cast<int>(i);
    }
    return -1;
}

bool contains_subseq(const TokenSeq& haystack, const TokenSeq& needle) {
    return find_subseq(haystack, needle) >= 0;
}

}  // namespace framegate::tokens
