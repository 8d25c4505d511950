#pragma once

#include <map>
#include <string>
#include <vector>

#include "dito/nn.hpp"
#include "dito/vit.hpp"

namespace dito::text {

// Whitespace tokenizer over a closed vocabulary. Id 0 is the padding token.
class Vocabulary {
public:
    Vocabulary() = default;
    explicit Vocabulary(const std::vector<std::string>& words);

    int size() const { return static_cast<int>(words_.size()); }
    // Throws std::invalid_argument for an out-of-vocabulary word.
    int id(const std::string& word) const;
    bool contains(const std::string& word) const { return ids_.count(word) != 0; }
    std::vector<int> encode(const std::string& sentence) const;
    const std::vector<std::string>& words() const { return words_; }

private:
    std::vector<std::string> words_{"<pad>"};
    std::map<std::string, int> ids_{{"<pad>", 0}};
};

std::vector<std::string> split_words(const std::string& s);

// Rows of padded ids with a parallel 0/1 mask.
struct TextBatch {
    int max_len = 0;
    std::vector<std::vector<int>> ids;
    std::vector<std::vector<int>> mask;

    int size() const { return static_cast<int>(ids.size()); }
    // Pads each sequence to max_len (0 = longest sequence).
    static TextBatch from_sequences(const std::vector<std::vector<int>>& seqs, int max_len = 0);
    static TextBatch from_sentences(const Vocabulary& vocab, const std::vector<std::string>& sentences, int max_len = 0);
};

struct TextConfig {
    int vocab_size = 0;
    int dim = 64;
    int layers = 2;
    int heads = 4;
    int max_len = 24;
    int joint_dim = 64;
    int mlp_ratio = 4;
};

struct TextEncoderParams {
    Tensor token_embed;  // (vocab, dim)
    Tensor pos_embed;    // (max_len, dim)
    std::vector<vit::BlockParams> blocks;
    LayerNorm final_ln;
    Linear proj;  // dim -> joint, no bias
    int heads = 4;

    static TextEncoderParams init(const TextConfig& cfg, Rng& rng);

    template <typename F>
    void visit(F&& f, const std::string& prefix) {
        f(prefix + "token_embed", token_embed);
        f(prefix + "pos_embed", pos_embed);
        for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].visit(f, prefix + "blocks." + std::to_string(i) + ".");
        final_ln.visit(f, prefix + "final_ln.");
        proj.visit(f, prefix + "proj.");
    }
};

// Transformer over the unmasked tokens of each row, masked mean pooling,
// projection, L2 normalization. Returns (batch, joint_dim). Padding never
// enters the computation, so the result is independent of max_len.
Tensor encode_text(const TextBatch& batch, const TextEncoderParams& params);

}  // namespace dito::text
