#include "dito/text.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>

#include "dito/ops.hpp"

namespace dito::text {

Vocabulary::Vocabulary(const std::vector<std::string>& words) {
    for (const auto& w : words) {
        if (w.empty() || ids_.count(w)) continue;
        ids_[w] = static_cast<int>(words_.size());
        words_.push_back(w);
    }
}

int Vocabulary::id(const std::string& word) const {
    auto it = ids_.find(word);
    if (it == ids_.end()) throw std::invalid_argument("out-of-vocabulary word '" + word + "'");
    return it->second;
}

std::vector<int> Vocabulary::encode(const std::string& sentence) const {
    std::vector<int> out;
    for (const auto& w : split_words(sentence)) out.push_back(id(w));
    return out;
}

std::vector<std::string> split_words(const std::string& s) {
    std::istringstream is(s);
    std::vector<std::string> out;
    std::string w;
    while (is >> w) {
        std::transform(w.begin(), w.end(), w.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
        out.push_back(w);
    }
    return out;
}

TextBatch TextBatch::from_sequences(const std::vector<std::vector<int>>& seqs, int max_len) {
    TextBatch b;
    int longest = 0;
    for (const auto& s : seqs) longest = std::max<int>(longest, static_cast<int>(s.size()));
    b.max_len = max_len > 0 ? max_len : longest;
    for (const auto& s : seqs) {
        if (static_cast<int>(s.size()) > b.max_len) {
            throw std::invalid_argument("TextBatch: sequence of length " + std::to_string(s.size()) +
                                        " exceeds max_len " + std::to_string(b.max_len));
        }
        std::vector<int> ids(s), mask(s.size(), 1);
        ids.resize(b.max_len, 0);
        mask.resize(b.max_len, 0);
        b.ids.push_back(std::move(ids));
        b.mask.push_back(std::move(mask));
    }
    return b;
}

TextBatch TextBatch::from_sentences(const Vocabulary& vocab, const std::vector<std::string>& sentences, int max_len) {
    std::vector<std::vector<int>> seqs;
    seqs.reserve(sentences.size());
    for (const auto& s : sentences) seqs.push_back(vocab.encode(s));
    return from_sequences(seqs, max_len);
}

TextEncoderParams TextEncoderParams::init(const TextConfig& cfg, Rng& rng) {
    if (cfg.vocab_size < 1) throw std::invalid_argument("TextConfig: vocab_size must be positive");
    if (cfg.dim % cfg.heads != 0) throw std::invalid_argument("TextConfig: heads must divide dim");
    TextEncoderParams p;
    p.token_embed = randn({cfg.vocab_size, cfg.dim}, 0.5, rng);
    p.pos_embed = randn({cfg.max_len, cfg.dim}, 0.02, rng);
    for (int i = 0; i < cfg.layers; ++i) p.blocks.push_back(vit::BlockParams::init(cfg.dim, cfg.mlp_ratio, rng));
    p.final_ln = LayerNorm::init(cfg.dim);
    p.proj = Linear::init(cfg.dim, cfg.joint_dim, rng, false);
    p.heads = cfg.heads;
    return p;
}

Tensor encode_text(const TextBatch& batch, const TextEncoderParams& params) {
    const int vocab = params.token_embed.dim(0);
    const int max_pos = params.pos_embed.dim(0);
    std::vector<int> tok, pos;
    RowGroups groups;
    std::vector<int> rows;
    for (int b = 0; b < batch.size(); ++b) {
        rows.clear();
        int p = 0;
        for (int t = 0; t < batch.max_len; ++t) {
            if (!batch.mask[b][t]) continue;
            const int id = batch.ids[b][t];
            if (id <= 0 || id >= vocab) throw std::invalid_argument("encode_text: token id " + std::to_string(id) + " outside the vocabulary");
            if (p >= max_pos) throw std::invalid_argument("encode_text: sequence longer than the position table");
            rows.push_back(static_cast<int>(tok.size()));
            tok.push_back(id);
            pos.push_back(p++);
        }
        if (rows.empty()) throw std::invalid_argument("encode_text: empty sequence in row " + std::to_string(b));
        groups.add(rows);
    }
    Tensor x = add(gather_rows(params.token_embed, tok), gather_rows(params.pos_embed, pos));
    for (const auto& blk : params.blocks) {
        Tensor a = multihead_attention(blk.qkv(blk.ln1(x)), groups, params.heads);
        x = add(x, blk.proj(a));
        x = add(x, blk.fc2(gelu(blk.fc1(blk.ln2(x)))));
    }
    x = params.final_ln(x);
    return l2_normalize_rows(params.proj(group_mean(x, groups)));
}

}  // namespace dito::text
