#include "hnf/textknow.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <utility>

#define CPPHTTPLIB_OPENSSL_SUPPORT
#include "httplib.h"
#include "json.hpp"

#include "hnf/errors.hpp"
#include "hnf/optim.hpp"
#include "hnf/rng.hpp"

namespace hnf {

namespace {

const char* kPromptTemplates[8] = {
    "Introduction: Provide an overview of the nanomaterial category and its significance in "
    "various fields.",
    "Definition and Structure: Define the nanomaterial category and describe its typical "
    "structure at the nanoscale.",
    "Synthesis Methods: Explore different methods used to synthesize or fabricate nanomaterials "
    "in this category. Discuss their advantages and limitations.",
    "Properties: Highlight the unique physical, chemical, and electronic properties exhibited by "
    "nanomaterials in this category. Discuss how these properties differ from their bulk "
    "counterparts.",
    "Applications: Explore the wide range of applications where nanomaterials in this category "
    "are utilized. Discuss their potential impact in fields such as electronics, energy, "
    "medicine, environmental remediation, etc.",
    "Surface Modification: Describe the strategies used to modify the surface properties of "
    "nanomaterials in this category, such as functionalization, coating, or doping. Explain how "
    "these modifications enhance their performance or enable specific applications.",
    "Toxicity and Safety: Address the potential health and environmental concerns associated "
    "with nanomaterials in this category. Discuss studies on their toxicity, risk assessment, "
    "and safety measures to mitigate any potential hazards.",
    "Future Directions: Discuss current research trends and future prospects for nanomaterials "
    "in this category. Highlight emerging technologies, challenges, and areas of active "
    "exploration.",
};

std::string replace_all(std::string s, const std::string& from, const std::string& to) {
    std::size_t pos = 0;
    while ((pos = s.find(from, pos)) != std::string::npos) {
        s.replace(pos, from.size(), to);
        pos += to.size();
    }
    return s;
}

std::string env_or(const std::string& explicit_value, const char* var) {
    if (!explicit_value.empty()) return explicit_value;
    const char* v = std::getenv(var);
    return v ? std::string(v) : std::string();
}

std::pair<std::string, std::string> split_endpoint(const std::string& url) {
    const auto scheme_end = url.find("://");
    const auto path_start =
        (scheme_end == std::string::npos) ? url.find('/') : url.find('/', scheme_end + 3);
    if (path_start == std::string::npos) return {url, "/"};
    return {url.substr(0, path_start), url.substr(path_start)};
}

nlohmann::json record_json(const FixtureRecord& rec) {
    return nlohmann::json{{"category", rec.category},
                          {"prompt_id", rec.prompt_id},
                          {"prompt", rec.prompt},
                          {"response", rec.response}};
}

void append_fixture(const std::string& path, const std::vector<FixtureRecord>& records) {
    std::ofstream out(path, std::ios::app);
    if (!out) throw TransportError("cannot open fixture for recording: " + path);
    for (const FixtureRecord& rec : records) out << record_json(rec).dump() << "\n";
}

std::vector<std::string> split_words(const std::string& doc) {
    std::vector<std::string> out;
    std::string cur;
    for (const char ch : doc) {
        const auto u = static_cast<unsigned char>(ch);
        const bool digit = u >= '0' && u <= '9';
        const bool lower = u >= 'a' && u <= 'z';
        const bool upper = u >= 'A' && u <= 'Z';
        if (digit || lower) {
            cur.push_back(static_cast<char>(u));
        } else if (upper) {
            cur.push_back(static_cast<char>(u - 'A' + 'a'));
        } else if (!cur.empty()) {
            out.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

Expr ln_affine(Expr x, Expr g, Expr b) {
    const int64_t rows = x->shape[0];
    Expr normed = layer_norm(std::move(x));
    Expr scaled = mul(std::move(normed), broadcast_rows(std::move(g), rows));
    return add(std::move(scaled), broadcast_rows(std::move(b), rows));
}

Tensor sinusoid_positions(int64_t m, int64_t d) {
    Tensor pe = Tensor::zeros({m, d}, DType::F64);
    for (int64_t pos = 0; pos < m; ++pos) {
        for (int64_t i = 0; i < d; ++i) {
            const double rate =
                std::pow(10000.0, -2.0 * static_cast<double>(i / 2) / static_cast<double>(d));
            const double angle = static_cast<double>(pos) * rate;
            pe.set(pos, i, i % 2 == 0 ? std::sin(angle) : std::cos(angle));
        }
    }
    return pe;
}

}  // namespace

PromptSuite render_cot_prompts(const std::string& category) {
    if (category.empty()) throw EmptyCategory("render_cot_prompts needs a category name");
    PromptSuite suite;
    suite.category = category;
    suite.prompts.reserve(8);
    for (const char* tmpl : kPromptTemplates) {
        std::string p = replace_all(tmpl, "the nanomaterial category",
                                    "the " + category + " nanomaterial category");
        p = replace_all(std::move(p), "nanomaterials in this category", category + " nanomaterials");
        suite.prompts.push_back(std::move(p));
    }
    return suite;
}

std::vector<FixtureRecord> load_fixture(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FixtureMiss("fixture file not readable: " + path);
    std::vector<FixtureRecord> records;
    std::string line;
    int64_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
            FixtureRecord rec;
            rec.category = j.at("category").get<std::string>();
            rec.prompt_id = j.at("prompt_id").get<int>();
            rec.prompt = j.at("prompt").get<std::string>();
            rec.response = j.at("response").get<std::string>();
            records.push_back(std::move(rec));
        } catch (const nlohmann::json::exception& e) {
            throw FixtureMiss(path + ":" + std::to_string(lineno) + " is not a fixture record: " +
                              e.what());
        }
    }
    return records;
}

void save_fixture(const std::string& path, const std::vector<FixtureRecord>& records) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw TransportError("cannot write fixture: " + path);
    for (const FixtureRecord& rec : records) out << record_json(rec).dump() << "\n";
}

std::vector<std::string> fetch_description(const PromptSuite& suite, const FetchOptions& opt) {
    if (suite.prompts.size() != 8)
        throw std::invalid_argument("prompt suite must hold exactly 8 prompts, got " +
                                    std::to_string(suite.prompts.size()));
    if (opt.mode == ClientMode::replay) {
        std::map<std::pair<std::string, int>, std::string> by_key;
        for (FixtureRecord& rec : load_fixture(opt.fixture_path))
            by_key[{rec.category, rec.prompt_id}] = std::move(rec.response);
        std::vector<std::string> docs;
        docs.reserve(8);
        for (int pid = 1; pid <= 8; ++pid) {
            auto it = by_key.find({suite.category, pid});
            if (it == by_key.end())
                throw FixtureMiss("(" + suite.category + ", " + std::to_string(pid) +
                                  ") absent from " + opt.fixture_path);
            docs.push_back(std::move(it->second));
        }
        return docs;
    }

    const std::string endpoint = env_or(opt.endpoint, "LLM_ENDPOINT");
    const std::string model = env_or(opt.model, "LLM_MODEL");
    const std::string api_key = env_or(opt.api_key, "LLM_API_KEY");
    if (endpoint.empty())
        throw TransportError("live mode needs an endpoint (option or LLM_ENDPOINT)");

    const auto [base, path] = split_endpoint(endpoint);
    httplib::Client client(base);
    client.set_connection_timeout(10, 0);
    client.set_read_timeout(120, 0);
    httplib::Headers headers;
    if (!api_key.empty()) headers.emplace("Authorization", "Bearer " + api_key);

    std::vector<std::string> docs;
    std::vector<FixtureRecord> recorded;
    for (int pid = 1; pid <= 8; ++pid) {
        const std::string& prompt = suite.prompts[static_cast<std::size_t>(pid - 1)];
        const nlohmann::json payload = {
            {"model", model},
            {"messages", nlohmann::json::array({{{"role", "user"}, {"content", prompt}}})},
            {"temperature", 0.0},
            {"top_p", 1.0},
        };
        auto res = client.Post(path, headers, payload.dump(), "application/json");
        if (!res)
            throw TransportError("POST " + endpoint + ": " + httplib::to_string(res.error()));
        if (res->status != 200)
            throw TransportError("POST " + endpoint + " returned status " +
                                 std::to_string(res->status));
        std::string content;
        try {
            const auto body = nlohmann::json::parse(res->body);
            content = body.at("choices").at(0).at("message").at("content").get<std::string>();
        } catch (const nlohmann::json::exception& e) {
            throw TransportError(std::string("malformed completion response: ") + e.what());
        }
        docs.push_back(content);
        recorded.push_back({suite.category, pid, prompt, std::move(content)});
    }
    if (!opt.fixture_path.empty()) append_fixture(opt.fixture_path, recorded);
    return docs;
}

std::vector<std::string> TextCorpus::categories() const {
    std::vector<std::string> out;
    out.reserve(documents.size());
    for (const auto& [cat, docs] : documents) out.push_back(cat);
    return out;
}

TextCorpus build_corpus(const std::vector<FixtureRecord>& records) {
    if (records.empty()) throw EmptyCorpus("no fixture records");
    TextCorpus corpus;
    std::map<std::string, std::map<int, std::string>> grouped;
    for (const FixtureRecord& rec : records) grouped[rec.category][rec.prompt_id] = rec.response;
    std::map<std::string, int64_t> counts;
    for (auto& [cat, by_id] : grouped) {
        auto& docs = corpus.documents[cat];
        for (auto& [pid, resp] : by_id) {
            for (std::string& w : split_words(resp)) ++counts[std::move(w)];
            docs.push_back(std::move(resp));
        }
    }
    std::vector<std::pair<std::string, int64_t>> by_freq(counts.begin(), counts.end());
    std::sort(by_freq.begin(), by_freq.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    corpus.id_to_token = {"<pad>", "<mask>", "<unk>"};
    corpus.id_to_token.reserve(3 + by_freq.size());
    for (auto& [tok, cnt] : by_freq) {
        corpus.vocab.emplace(tok, static_cast<int64_t>(corpus.id_to_token.size()));
        corpus.id_to_token.push_back(tok);
    }
    return corpus;
}

std::vector<int64_t> tokenize_text(const std::string& doc, const TextCorpus& corpus) {
    std::vector<int64_t> ids;
    for (const std::string& w : split_words(doc)) {
        auto it = corpus.vocab.find(w);
        ids.push_back(it == corpus.vocab.end() ? TextCorpus::unk_id : it->second);
    }
    return ids;
}

SmallLM init_small_lm(const SmallLMConfig& cfg, int64_t vocab_size, uint64_t seed, DType dtype) {
    if (cfg.heads < 1 || cfg.d % cfg.heads != 0)
        throw ShapeMismatch("encoder width " + std::to_string(cfg.d) + " not divisible by " +
                            std::to_string(cfg.heads) + " heads");
    if (vocab_size < 3)
        throw ShapeMismatch("vocabulary must include the three special ids, got size " +
                            std::to_string(vocab_size));
    SmallLM lm;
    lm.cfg = cfg;
    lm.vocab_size = vocab_size;
    const int64_t d = cfg.d;
    const int64_t dh = d / cfg.heads;
    auto mat = [&](const std::string& name, Shape shape) {
        lm.params[name] = xavier_uniform(std::move(shape), seed, name, dtype);
    };
    mat("lm.embed", {vocab_size, d});
    lm.params["lm.ln1.g"] = Tensor::full({d}, 1.0, dtype);
    lm.params["lm.ln1.b"] = Tensor::zeros({d}, dtype);
    for (int64_t h = 0; h < cfg.heads; ++h) {
        const std::string hp = "lm.heads." + std::to_string(h) + ".";
        mat(hp + "wq", {d, dh});
        mat(hp + "wk", {d, dh});
        mat(hp + "wv", {d, dh});
    }
    mat("lm.wo", {d, d});
    lm.params["lm.ln2.g"] = Tensor::full({d}, 1.0, dtype);
    lm.params["lm.ln2.b"] = Tensor::zeros({d}, dtype);
    mat("lm.ffn.w1", {d, cfg.ffn_hidden});
    lm.params["lm.ffn.b1"] = Tensor::zeros({cfg.ffn_hidden}, dtype);
    mat("lm.ffn.w2", {cfg.ffn_hidden, d});
    lm.params["lm.ffn.b2"] = Tensor::zeros({d}, dtype);
    mat("lm.out", {d, vocab_size});
    return lm;
}

Expr encode_tokens_expr(const std::vector<int64_t>& tokens, const SmallLMConfig& cfg,
                        int64_t vocab_size) {
    if (tokens.empty()) throw EmptySequence("encoder input is empty");
    const auto m = static_cast<int64_t>(tokens.size());
    if (m > cfg.max_len)
        throw ShapeMismatch("chunk of " + std::to_string(m) + " tokens exceeds max length " +
                            std::to_string(cfg.max_len));
    const int64_t d = cfg.d;
    const int64_t dh = d / cfg.heads;

    Expr embed = leaf("lm.embed", {vocab_size, d});
    std::vector<Expr> rows;
    rows.reserve(tokens.size());
    for (const int64_t id : tokens) {
        if (id < 0 || id >= vocab_size)
            throw UnknownName("token id " + std::to_string(id) + " outside vocabulary of " +
                              std::to_string(vocab_size));
        rows.push_back(slice(embed, 0, id, id + 1));
    }
    Expr x = rows.size() == 1 ? rows[0] : concat(std::move(rows), 0);
    x = add(std::move(x), constant(sinusoid_positions(m, d)));

    Expr a = ln_affine(x, leaf("lm.ln1.g", {d}), leaf("lm.ln1.b", {d}));
    std::vector<Expr> heads;
    heads.reserve(static_cast<std::size_t>(cfg.heads));
    for (int64_t h = 0; h < cfg.heads; ++h) {
        const std::string hp = "lm.heads." + std::to_string(h) + ".";
        Expr q = matmul(a, leaf(hp + "wq", {d, dh}));
        Expr k = matmul(a, leaf(hp + "wk", {d, dh}));
        Expr v = matmul(a, leaf(hp + "wv", {d, dh}));
        Expr scores = softmax(
            scalar_mul(1.0 / std::sqrt(static_cast<double>(dh)), matmul(q, transpose(k))), 1);
        heads.push_back(matmul(std::move(scores), std::move(v)));
    }
    Expr cat = heads.size() == 1 ? heads[0] : concat(std::move(heads), 1);
    Expr attn = matmul(std::move(cat), leaf("lm.wo", {d, d}));
    Expr x1 = add(std::move(x), std::move(attn));

    Expr f = ln_affine(x1, leaf("lm.ln2.g", {d}), leaf("lm.ln2.b", {d}));
    Expr hidden = relu(affine_rows(std::move(f), leaf("lm.ffn.w1", {d, cfg.ffn_hidden}),
                                   leaf("lm.ffn.b1", {cfg.ffn_hidden})));
    Expr ffn = affine_rows(std::move(hidden), leaf("lm.ffn.w2", {cfg.ffn_hidden, d}),
                           leaf("lm.ffn.b2", {d}));
    return add(std::move(x1), std::move(ffn));
}

Expr mlm_loss_expr(const std::vector<int64_t>& tokens, const std::vector<int64_t>& masked,
                   const SmallLMConfig& cfg, int64_t vocab_size) {
    if (masked.empty()) throw ShapeMismatch("no masked positions");
    std::vector<int64_t> corrupted = tokens;
    for (const int64_t p : masked) {
        if (p < 0 || p >= static_cast<int64_t>(tokens.size()))
            throw ShapeMismatch("masked position " + std::to_string(p) +
                                " outside sequence of length " + std::to_string(tokens.size()));
        corrupted[static_cast<std::size_t>(p)] = TextCorpus::mask_id;
    }
    Expr h = encode_tokens_expr(corrupted, cfg, vocab_size);

    const auto k = static_cast<int64_t>(masked.size());
    std::vector<Expr> picked;
    picked.reserve(masked.size());
    Tensor onehot = Tensor::zeros({k, vocab_size}, DType::F64);
    for (int64_t i = 0; i < k; ++i) {
        const int64_t p = masked[static_cast<std::size_t>(i)];
        picked.push_back(slice(h, 0, p, p + 1));
        onehot.set(i, tokens[static_cast<std::size_t>(p)], 1.0);
    }
    Expr rows = picked.size() == 1 ? picked[0] : concat(std::move(picked), 0);
    Expr logits = matmul(std::move(rows), leaf("lm.out", {cfg.d, vocab_size}));
    Expr log_probs = log_(softmax(std::move(logits), 1));
    return scalar_mul(-1.0 / static_cast<double>(k),
                      reduce_sum(mul(std::move(log_probs), constant(std::move(onehot)))));
}

std::vector<std::vector<int64_t>> chunk_tokens(const std::vector<int64_t>& tokens,
                                               int64_t max_len) {
    if (max_len < 1) throw ShapeMismatch("chunk length must be positive");
    std::vector<std::vector<int64_t>> chunks;
    for (std::size_t start = 0; start < tokens.size();
         start += static_cast<std::size_t>(max_len)) {
        const std::size_t stop =
            std::min(tokens.size(), start + static_cast<std::size_t>(max_len));
        chunks.emplace_back(tokens.begin() + static_cast<std::ptrdiff_t>(start),
                            tokens.begin() + static_cast<std::ptrdiff_t>(stop));
    }
    return chunks;
}

Tensor encode_text(const std::vector<int64_t>& tokens, const SmallLM& lm) {
    if (tokens.empty()) throw EmptySequence("encode_text got an empty sequence");
    Session s;
    s.bind_all(lm.params);
    Tensor out = Tensor::zeros({static_cast<int64_t>(tokens.size()), lm.cfg.d}, DType::F64);
    int64_t row = 0;
    for (const auto& chunk : chunk_tokens(tokens, lm.cfg.max_len)) {
        const Tensor h = eval(encode_tokens_expr(chunk, lm.cfg, lm.vocab_size), s);
        for (int64_t r = 0; r < h.dim(0); ++r, ++row)
            for (int64_t c = 0; c < h.dim(1); ++c) out.set(row, c, h.at(r, c));
    }
    return out;
}

SmallLM mlm_pretrain(const TextCorpus& corpus, SmallLM lm, double mask_rate, int64_t epochs,
                     uint64_t seed, MlmTrace* trace) {
    if (mask_rate <= 0.0 || mask_rate >= 1.0)
        throw std::invalid_argument("mask rate must lie strictly between 0 and 1");
    if (epochs < 1) throw std::invalid_argument("epochs must be positive");

    std::vector<std::vector<int64_t>> sequences;
    for (const auto& [cat, docs] : corpus.documents) {
        for (const std::string& doc : docs) {
            for (auto& chunk : chunk_tokens(tokenize_text(doc, corpus), lm.cfg.max_len))
                sequences.push_back(std::move(chunk));
        }
    }
    if (sequences.empty()) throw EmptyCorpus("corpus has no token sequences");

    std::vector<std::string> wanted;
    for (const auto& [name, t] : lm.params) wanted.push_back(name);

    AdamOpt opt(1e-3);
    for (int64_t e = 0; e < epochs; ++e) {
        for (std::size_t i = 0; i < sequences.size(); ++i) {
            const auto& seq = sequences[i];
            const auto len = static_cast<int64_t>(seq.size());
            auto g = named_rng(seed, "mlm." + std::to_string(e) + "." + std::to_string(i));
            int64_t k = static_cast<int64_t>(
                std::ceil(mask_rate * static_cast<double>(len)));
            k = std::min(k, len);
            std::vector<int64_t> idx(static_cast<std::size_t>(len));
            for (int64_t j = 0; j < len; ++j) idx[static_cast<std::size_t>(j)] = j;
            for (int64_t j = 0; j < k; ++j)
                std::swap(idx[static_cast<std::size_t>(j)],
                          idx[static_cast<std::size_t>(j + rng_index(g, len - j))]);
            std::vector<int64_t> masked(idx.begin(), idx.begin() + k);
            std::sort(masked.begin(), masked.end());

            Expr loss = mlm_loss_expr(seq, masked, lm.cfg, lm.vocab_size);
            Session s;
            s.bind_all(lm.params);
            if (trace) trace->loss.push_back(eval_scalar(loss, s));
            opt.step(lm.params, grad(loss, s, wanted));
        }
    }
    return lm;
}

Expr attention_pool_expr(Expr h, Expr u) {
    if (h->shape.size() != 2)
        throw ShapeMismatch("attention pooling expects a token matrix, got " +
                            shape_str(h->shape));
    const int64_t d = h->shape[1];
    if (shape_numel(u->shape) != d)
        throw ShapeMismatch("pooling vector " + shape_str(u->shape) + " vs width " +
                            std::to_string(d));
    Expr scores = matmul(h, reshape(std::move(u), {d, 1}));
    Expr alpha = softmax(std::move(scores), 0);
    return matmul(transpose(std::move(alpha)), std::move(h));
}

Tensor attention_pool(const Tensor& h, const Tensor& u) {
    Session s;
    s.bind("pool.h", h);
    s.bind("pool.u", u);
    const Tensor pooled =
        eval(attention_pool_expr(leaf("pool.h", h.shape()), leaf("pool.u", u.shape())), s);
    Tensor out = Tensor::zeros({pooled.dim(1)}, pooled.dtype());
    for (int64_t c = 0; c < pooled.dim(1); ++c) out.set(c, pooled.at(0, c));
    return out;
}

BankExprs build_bank_exprs(const TextCorpus& corpus, const SmallLMConfig& cfg) {
    BankExprs bank;
    for (const auto& [cat, docs] : corpus.documents) {
        std::vector<Expr> pieces;
        for (const std::string& doc : docs) {
            for (const auto& chunk : chunk_tokens(tokenize_text(doc, corpus), cfg.max_len))
                pieces.push_back(encode_tokens_expr(chunk, cfg, corpus.vocab_size()));
        }
        if (pieces.empty())
            throw EmptyCorpus("category '" + cat + "' contributed no tokens");
        Expr all = pieces.size() == 1 ? pieces[0] : concat(std::move(pieces), 0);
        bank.categories.push_back(cat);
        bank.h_text.push_back(attention_pool_expr(std::move(all), leaf("text.u", {cfg.d})));
    }
    return bank;
}

TextKnowledgeBank build_bank(const TextCorpus& corpus, const SmallLM& lm, const Tensor& u,
                             const Tensor& v) {
    const BankExprs exprs = build_bank_exprs(corpus, lm.cfg);
    Session s;
    s.bind_all(lm.params);
    s.bind("text.u", u);
    TextKnowledgeBank bank;
    bank.categories = exprs.categories;
    bank.u = u;
    bank.v = v;
    for (const Expr& e : exprs.h_text) {
        const Tensor h = eval(e, s);
        Tensor flat = Tensor::zeros({h.dim(1)}, h.dtype());
        for (int64_t c = 0; c < h.dim(1); ++c) flat.set(c, h.at(0, c));
        bank.h_text.push_back(std::move(flat));
    }
    return bank;
}

Expr match_scores_expr(Expr h_fus, const std::vector<Expr>& h_text, Expr v) {
    if (h_fus->shape.size() != 2 || h_fus->shape[0] != 1)
        throw ShapeMismatch("fused embedding must be {1,d}, got " + shape_str(h_fus->shape));
    if (h_text.empty()) throw IncompleteBank("no bank embeddings");
    const int64_t d = h_fus->shape[1];
    Expr vcol = reshape(std::move(v), {d, 1});
    std::vector<Expr> scores;
    scores.reserve(h_text.size());
    for (const Expr& ht : h_text) {
        if (ht->shape != h_fus->shape)
            throw ShapeMismatch("bank embedding " + shape_str(ht->shape) + " vs fused " +
                                shape_str(h_fus->shape));
        scores.push_back(matmul(mul(ht, h_fus), vcol));
    }
    return scores.size() == 1 ? scores[0] : concat(std::move(scores), 1);
}

MatchResult match_text_embedding(const Tensor& h_fus, const TextKnowledgeBank& bank) {
    const auto c = static_cast<int64_t>(bank.categories.size());
    if (c == 0) throw IncompleteBank("bank has no categories");
    if (bank.h_text.size() != bank.categories.size())
        throw IncompleteBank(std::to_string(bank.h_text.size()) + " embeddings for " +
                             std::to_string(bank.categories.size()) + " categories");
    const int64_t d = h_fus.numel();
    if (bank.v.numel() != d)
        throw IncompleteBank("matching vector has " + std::to_string(bank.v.numel()) +
                             " entries, fused embedding has " + std::to_string(d));
    for (int64_t k = 0; k < c; ++k)
        if (bank.h_text[static_cast<std::size_t>(k)].numel() != d)
            throw IncompleteBank("embedding for '" + bank.categories[static_cast<std::size_t>(k)] +
                                 "' has " +
                                 std::to_string(bank.h_text[static_cast<std::size_t>(k)].numel()) +
                                 " entries, fused embedding has " + std::to_string(d));

    MatchResult res;
    res.scores = Tensor::zeros({c}, DType::F64);
    for (int64_t k = 0; k < c; ++k) {
        const Tensor& ht = bank.h_text[static_cast<std::size_t>(k)];
        double s = 0.0;
        for (int64_t j = 0; j < d; ++j) s += bank.v.at(j) * ht.at(j) * h_fus.at(j);
        res.scores.set(k, s);
    }
    double best = res.scores.at(0);
    res.best = 0;
    for (int64_t k = 1; k < c; ++k) {
        if (res.scores.at(k) > best) {
            best = res.scores.at(k);
            res.best = k;
        }
    }
    res.probabilities = Tensor::zeros({c}, DType::F64);
    double z = 0.0;
    for (int64_t k = 0; k < c; ++k) z += std::exp(res.scores.at(k) - best);
    for (int64_t k = 0; k < c; ++k)
        res.probabilities.set(k, std::exp(res.scores.at(k) - best) / z);
    res.h_text_fus = bank.h_text[static_cast<std::size_t>(res.best)];
    return res;
}

}  // namespace hnf
