#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "textgan/models.hpp"

namespace textgan {

// Lowercases, splits on whitespace, and separates non-word characters into
// single-character tokens ("the::" -> "the", ":", ":"). Word characters are
// alphanumerics and the apostrophe. The reserved literals <bos>/<eos>/<pad>/
// <unk> survive as single tokens.
std::vector<std::string> tokenize(const std::string& line);

// Word-level vocabulary with reserved ids 0..3 (BOS, EOS, PAD, UNK).
class Vocab {
public:
    Vocab();

    int size() const { return static_cast<int>(id_to_token_.size()); }

    // UNK for out-of-vocabulary tokens.
    int id_of(const std::string& token) const;
    const std::string& token_of(int id) const;
    bool contains(const std::string& token) const { return token_to_id_.count(token) > 0; }

    // Token ids for a text line, without BOS/EOS framing. When
    // allow_reserved is false (corpus ingestion), reserved literals in the
    // text map to UNK instead of their reserved ids.
    std::vector<int> encode(const std::string& line, bool allow_reserved = true) const;
    std::string decode(std::span<const int> ids) const;

    void add_token(const std::string& token);

    void save(const std::filesystem::path& path) const;
    static Vocab load(const std::filesystem::path& path);

private:
    std::unordered_map<std::string, int> token_to_id_;
    std::vector<std::string> id_to_token_;
};

// Tokens with count >= min_count get ids, assigned by (count desc, token
// lexicographic); everything else encodes to UNK.
Vocab build_vocab(const std::vector<std::string>& lines, int min_count = 1);

// One sentence per line, UTF-8, LF terminators. Empty file -> IngestError.
std::vector<std::string> read_lines(const std::filesystem::path& path);

struct Corpus {
    std::vector<std::vector<int>> sentences;  // token ids, no BOS/EOS, never empty
    std::string source;
    std::string split_tag = "full";  // full | train | validation
};

// Sentences longer than max_sentence_len are truncated to it.
Corpus load_corpus(const std::filesystem::path& path, const Vocab& vocab, int max_sentence_len,
                   const std::string& name = "");
Corpus corpus_from_lines(const std::vector<std::string>& lines, const Vocab& vocab, int max_sentence_len,
                         const std::string& name);

// Deterministic disjoint partition; train gets round(n * ratio) sentences.
std::pair<Corpus, Corpus> split_corpus(const Corpus& corpus, double ratio, std::uint64_t seed);

struct Prompt {
    std::vector<int> prefix;        // first prompt_len tokens
    std::vector<int> continuation;  // remaining tokens of the source sentence
};

struct PromptSet {
    std::vector<Prompt> prompts;
    std::size_t skipped = 0;  // sentences not longer than the prompt length
};

PromptSet extract_prompts(const Corpus& corpus, std::size_t prompt_len = 5);

enum class PerturbMode { kMoveLeading, kDropLeading };

// move-leading: sentences starting with `token` get it relocated to the end;
// drop-leading: such leading tokens are removed. A sentence reduced to
// nothing is dropped from the corpus.
Corpus perturb(const Corpus& corpus, PerturbMode mode, const std::string& token, const Vocab& vocab);

// Supplies one more content token given what has been produced so far.
using ContinuationFn = std::function<int(std::span<const int>)>;

// Exactly ref_len tokens: truncate when longer, extend via `next` when
// shorter. `generated` must already be free of BOS/EOS framing.
std::vector<int> length_match(std::span<const int> generated, std::size_t ref_len, const ContinuationFn& next);

}  // namespace textgan
