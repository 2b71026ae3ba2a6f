#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "hnf/expr.hpp"
#include "hnf/tensor.hpp"

namespace hnf {

/// The eight-step prompt suite for one nanomaterial category, ordered
/// Introduction through Future Directions.
struct PromptSuite {
    std::string category;
    std::vector<std::string> prompts;
};

PromptSuite render_cot_prompts(const std::string& category);

/// One line of the JSONL fixture; the replay key is (category, prompt_id).
struct FixtureRecord {
    std::string category;
    int prompt_id = 0;  // 1-based
    std::string prompt;
    std::string response;
};

std::vector<FixtureRecord> load_fixture(const std::string& path);
void save_fixture(const std::string& path, const std::vector<FixtureRecord>& records);

enum class ClientMode { live, replay };

struct FetchOptions {
    ClientMode mode = ClientMode::replay;
    std::string fixture_path;
    // Live-mode connection settings; empty fields fall back to the
    // LLM_ENDPOINT / LLM_MODEL / LLM_API_KEY environment variables.
    std::string endpoint;
    std::string model;
    std::string api_key;
};

/// One document per prompt, in suite order. Replay never touches the
/// network; live posts each prompt and appends the responses to the fixture.
std::vector<std::string> fetch_description(const PromptSuite& suite, const FetchOptions& opt);

/// Response documents grouped per category plus the shared vocabulary.
/// Vocabulary ids: 0 pad, 1 mask, 2 unk, then corpus tokens ordered by
/// descending frequency with lexicographic tie-break.
struct TextCorpus {
    static constexpr int64_t pad_id = 0;
    static constexpr int64_t mask_id = 1;
    static constexpr int64_t unk_id = 2;

    std::map<std::string, std::vector<std::string>> documents;  // category -> by prompt order
    std::map<std::string, int64_t> vocab;
    std::vector<std::string> id_to_token;

    int64_t vocab_size() const { return static_cast<int64_t>(id_to_token.size()); }
    std::vector<std::string> categories() const;
};

TextCorpus build_corpus(const std::vector<FixtureRecord>& records);

/// Lowercase, split on non-alphanumeric runs, map out-of-vocabulary tokens
/// to unk. Total: never throws, empty input gives an empty sequence.
std::vector<int64_t> tokenize_text(const std::string& doc, const TextCorpus& corpus);

struct SmallLMConfig {
    int64_t d = 64;
    int64_t heads = 4;
    int64_t ffn_hidden = 128;
    int64_t max_len = 128;
};

/// Token embedding table, one pre-norm encoder block, and the MLM output
/// projection, all addressable through `params` under the "lm." prefix.
struct SmallLM {
    SmallLMConfig cfg;
    int64_t vocab_size = 0;
    ParamSet params;
};

SmallLM init_small_lm(const SmallLMConfig& cfg, int64_t vocab_size, uint64_t seed,
                      DType dtype = DType::F64);

/// Contextual embeddings for one chunk of at most cfg.max_len token ids,
/// as a graph over the "lm.*" leaves. Shape {m, d}.
Expr encode_tokens_expr(const std::vector<int64_t>& tokens, const SmallLMConfig& cfg,
                        int64_t vocab_size);

/// Mean masked-token cross-entropy for one chunk: the ids at `masked` are
/// replaced by the mask token and scored against their true values.
Expr mlm_loss_expr(const std::vector<int64_t>& tokens, const std::vector<int64_t>& masked,
                   const SmallLMConfig& cfg, int64_t vocab_size);

/// Splits a tokenized document into encoder-sized chunks.
std::vector<std::vector<int64_t>> chunk_tokens(const std::vector<int64_t>& tokens,
                                               int64_t max_len);

/// Contextual embeddings, one row per token; longer sequences are encoded
/// in max_len chunks and re-stacked.
Tensor encode_text(const std::vector<int64_t>& tokens, const SmallLM& lm);

struct MlmTrace {
    std::vector<double> loss;  // one entry per optimizer step
};

/// Masked-LM pretraining over every chunk of every document, one Adam step
/// per chunk, `epochs` passes. Masked positions are drawn from the seeded
/// stream only, so equal seeds give equal masks and equal traces.
SmallLM mlm_pretrain(const TextCorpus& corpus, SmallLM lm, double mask_rate, int64_t epochs,
                     uint64_t seed, MlmTrace* trace = nullptr);

/// alpha = softmax(h u) over rows, pooled = alpha^T h. Shape {1, d}.
Expr attention_pool_expr(Expr h, Expr u);

/// Convenience wrapper evaluating the pooling graph. h is {m, d}, u is {d};
/// the result is {d}.
Tensor attention_pool(const Tensor& h, const Tensor& u);

/// Per-category pooled text embeddings plus the matching parameters.
struct TextKnowledgeBank {
    std::vector<std::string> categories;  // label order
    std::vector<Tensor> h_text;           // one {d} vector per category
    Tensor u;
    Tensor v;
};

/// Pooled per-category embeddings as graphs over the "lm.*" and "text.u"
/// leaves, in corpus category order. Each expression has shape {1, d}.
struct BankExprs {
    std::vector<std::string> categories;
    std::vector<Expr> h_text;
};

BankExprs build_bank_exprs(const TextCorpus& corpus, const SmallLMConfig& cfg);

/// Evaluates the bank graphs against the given language model and matching
/// parameters. u and v are stored alongside the embeddings.
TextKnowledgeBank build_bank(const TextCorpus& corpus, const SmallLM& lm, const Tensor& u,
                             const Tensor& v);

/// score_k = v (h_text_k * h_fus) per category, concatenated to {1, c}.
/// h_fus is {1, d}, v is the "text.v" leaf of shape {d, 1}.
Expr match_scores_expr(Expr h_fus, const std::vector<Expr>& h_text, Expr v);

struct MatchResult {
    int64_t best = 0;       // argmax category index, lowest index on ties
    Tensor h_text_fus;      // {d}, the selected bank embedding
    Tensor scores;          // {c}
    Tensor probabilities;   // {c}, softmax of scores
};

MatchResult match_text_embedding(const Tensor& h_fus, const TextKnowledgeBank& bank);

}  // namespace hnf
