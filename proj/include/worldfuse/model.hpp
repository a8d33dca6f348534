// Small decoder-style sequence model: pre-LN causal self-attention blocks,
// learned positional embeddings, tap layers exposing the residual stream, and
// optional residual injections at those taps. A raw-loop decode path reuses
// K/V caches for greedy generation; it mirrors the graph ops exactly so cached
// decoding and the full forward agree to the last bit.
#pragma once

#include <functional>
#include <map>
#include <memory>
#include <set>
#include <vector>

#include "checkpoint.hpp"
#include "common.hpp"
#include "tensor.hpp"

namespace worldfuse {

struct ModelConfig {
    int layers = 4;
    int dim = 32;
    int heads = 2;
    int vocab_size = 0;
    int max_seq = 256;
    std::vector<int> taps;  // 1-based block indices exposing the stream

    void validate() const {
        if (layers < 1 || dim < 1 || heads < 1 || vocab_size < 1 || max_seq < 1)
            throw config_error("model config: all sizes must be positive");
        if (dim % heads != 0) throw config_error("model config: dim must divide by heads");
        for (int t : taps)
            if (t < 1 || t > layers) throw config_error("model config: tap layer out of range");
    }

    std::map<std::string, std::string> to_meta() const {
        std::string tap_str;
        for (size_t i = 0; i < taps.size(); ++i) {
            if (i) tap_str += ",";
            tap_str += std::to_string(taps[i]);
        }
        return {{"layers", std::to_string(layers)},   {"dim", std::to_string(dim)},
                {"heads", std::to_string(heads)},     {"vocab", std::to_string(vocab_size)},
                {"max_seq", std::to_string(max_seq)}, {"taps", tap_str}};
    }

    static ModelConfig from_meta(const std::map<std::string, std::string>& meta) {
        ModelConfig c;
        c.layers = std::stoi(meta.at("layers"));
        c.dim = std::stoi(meta.at("dim"));
        c.heads = std::stoi(meta.at("heads"));
        c.vocab_size = std::stoi(meta.at("vocab"));
        c.max_seq = std::stoi(meta.at("max_seq"));
        c.taps.clear();
        const std::string& s = meta.at("taps");
        size_t pos = 0;
        while (pos < s.size()) {
            size_t comma = s.find(',', pos);
            if (comma == std::string::npos) comma = s.size();
            c.taps.push_back(std::stoi(s.substr(pos, comma - pos)));
            pos = comma + 1;
        }
        return c;
    }
};

// Per-layer key/value rows captured during a forward pass, for incremental
// greedy decode.
struct KvCache {
    int length = 0;
    std::vector<std::vector<double>> k, v;  // [layer][length * dim]
};

// Called at tap layers during decode: receives the stream row, adds into it.
using RowInjection = std::function<void(int tap_layer, const double* row, double* add_into)>;

// Called at tap layers during a full forward: receives the tap output
// (sequence, dim) and returns the residual injection to add, or an undefined
// tensor for none.
using TapInjection = std::function<Tensor(int tap_layer, const Tensor& tap_output)>;

class Transformer {
public:
    Transformer(ModelConfig cfg, uint64_t seed) : cfg_(std::move(cfg)) {
        cfg_.validate();
        Rng rng(derive_seed(seed, "model-init"));
        const double sigma = 0.02;
        const int d = cfg_.dim;
        params_.add("tok_emb", Tensor::parameter_randn({cfg_.vocab_size, d}, rng, sigma));
        params_.add("pos_emb", Tensor::parameter_randn({cfg_.max_seq, d}, rng, sigma));
        for (int i = 1; i <= cfg_.layers; ++i) {
            std::string p = "l" + std::to_string(i) + ".";
            params_.add(p + "ln1.g", Tensor::parameter({d}, std::vector<double>(static_cast<size_t>(d), 1.0)));
            params_.add(p + "ln1.b", Tensor::parameter({d}, std::vector<double>(static_cast<size_t>(d), 0.0)));
            params_.add(p + "attn.wq", Tensor::parameter_randn({d, d}, rng, sigma));
            params_.add(p + "attn.wk", Tensor::parameter_randn({d, d}, rng, sigma));
            params_.add(p + "attn.wv", Tensor::parameter_randn({d, d}, rng, sigma));
            params_.add(p + "attn.wo", Tensor::parameter_randn({d, d}, rng, sigma));
            params_.add(p + "ln2.g", Tensor::parameter({d}, std::vector<double>(static_cast<size_t>(d), 1.0)));
            params_.add(p + "ln2.b", Tensor::parameter({d}, std::vector<double>(static_cast<size_t>(d), 0.0)));
            params_.add(p + "mlp.w1", Tensor::parameter_randn({d, 4 * d}, rng, sigma));
            params_.add(p + "mlp.b1", Tensor::parameter({4 * d}, std::vector<double>(static_cast<size_t>(4 * d), 0.0)));
            params_.add(p + "mlp.w2", Tensor::parameter_randn({4 * d, d}, rng, sigma));
            params_.add(p + "mlp.b2", Tensor::parameter({d}, std::vector<double>(static_cast<size_t>(d), 0.0)));
        }
        params_.add("lnf.g", Tensor::parameter({d}, std::vector<double>(static_cast<size_t>(d), 1.0)));
        params_.add("lnf.b", Tensor::parameter({d}, std::vector<double>(static_cast<size_t>(d), 0.0)));
        params_.add("head", Tensor::parameter_randn({d, cfg_.vocab_size}, rng, sigma));
    }

    Transformer(ModelConfig cfg, ParamStore params) : cfg_(std::move(cfg)), params_(std::move(params)) {
        cfg_.validate();
    }

    static Transformer from_checkpoint(const Checkpoint& ck) {
        return Transformer(ModelConfig::from_meta(ck.meta), ck.params.clone());
    }

    const ModelConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }
    void freeze() { params_.freeze(); }

    // Full forward pass. Optionally captures tap-layer streams, applies
    // residual injections at tap layers, and records K/V rows for decoding.
    Tensor forward(const std::vector<int>& tokens, std::map<int, Tensor>* taps_out = nullptr,
                   const TapInjection& inject = nullptr, KvCache* cache_out = nullptr) const {
        if (tokens.empty()) throw argument_error("forward: at least one token required");
        if (static_cast<int>(tokens.size()) > cfg_.max_seq)
            throw length_error("sequence of " + std::to_string(tokens.size()) +
                               " tokens exceeds context limit " + std::to_string(cfg_.max_seq));
        int s_len = static_cast<int>(tokens.size());
        if (cache_out) {
            cache_out->length = s_len;
            cache_out->k.assign(static_cast<size_t>(cfg_.layers), {});
            cache_out->v.assign(static_cast<size_t>(cfg_.layers), {});
        }
        std::vector<int> positions(static_cast<size_t>(s_len));
        for (int i = 0; i < s_len; ++i) positions[static_cast<size_t>(i)] = i;
        Tensor x = add(embedding(params_.get("tok_emb"), tokens),
                       embedding(params_.get("pos_emb"), positions));
        for (int i = 1; i <= cfg_.layers; ++i) {
            x = block(i, x, cache_out);
            if (std::find(cfg_.taps.begin(), cfg_.taps.end(), i) != cfg_.taps.end()) {
                if (taps_out) (*taps_out)[i] = x;
                if (inject) {
                    Tensor inj = inject(i, x);
                    if (inj.defined()) {
                        if (inj.shape() != Shape{s_len, cfg_.dim})
                            throw dimension_error("injection shape mismatch at layer " +
                                                  std::to_string(i));
                        x = add(x, inj);
                    }
                }
            }
        }
        x = layernorm(x, params_.get("lnf.g"), params_.get("lnf.b"));
        return matmul(x, params_.get("head"));
    }

    // Spec surface for precomputed injection tensors.
    Tensor forward_with_injection(const std::vector<int>& tokens,
                                  const std::map<int, Tensor>& injections) const {
        for (const auto& [layer, inj] : injections)
            if (std::find(cfg_.taps.begin(), cfg_.taps.end(), layer) == cfg_.taps.end())
                throw dimension_error("injection at non-tap layer " + std::to_string(layer));
        return forward(tokens, nullptr, [&](int layer, const Tensor&) -> Tensor {
            auto it = injections.find(layer);
            return it == injections.end() ? Tensor() : it->second;
        });
    }

    // Incremental greedy-decode step against a cache built by forward().
    // Mirrors forward() arithmetic exactly; runs on raw rows, no graph.
    std::vector<double> decode_step(KvCache& cache, int token,
                                    const RowInjection* inject = nullptr) const {
        const int d = cfg_.dim;
        const int pos = cache.length;
        if (pos + 1 > cfg_.max_seq) throw length_error("decode exceeds context limit");
        if (token < 0 || token >= cfg_.vocab_size) throw argument_error("decode: bad token id");

        std::vector<double> x(static_cast<size_t>(d));
        {
            const double* te = params_.get("tok_emb").data().data() + static_cast<size_t>(token) * d;
            const double* pe = params_.get("pos_emb").data().data() + static_cast<size_t>(pos) * d;
            for (int j = 0; j < d; ++j) x[static_cast<size_t>(j)] = te[j] + pe[j];
        }
        std::vector<double> xn(static_cast<size_t>(d)), q(static_cast<size_t>(d)),
            k(static_cast<size_t>(d)), v(static_cast<size_t>(d)), attn_out(static_cast<size_t>(d)),
            tmp(static_cast<size_t>(d));
        const int hd = d / cfg_.heads;
        for (int i = 1; i <= cfg_.layers; ++i) {
            std::string p = "l" + std::to_string(i) + ".";
            row_layernorm(x.data(), xn.data(), params_.get(p + "ln1.g"), params_.get(p + "ln1.b"));
            row_matmul(xn.data(), params_.get(p + "attn.wq"), q.data());
            row_matmul(xn.data(), params_.get(p + "attn.wk"), k.data());
            row_matmul(xn.data(), params_.get(p + "attn.wv"), v.data());
            std::vector<double>& ck = cache.k[static_cast<size_t>(i - 1)];
            std::vector<double>& cv = cache.v[static_cast<size_t>(i - 1)];
            ck.insert(ck.end(), k.begin(), k.end());
            cv.insert(cv.end(), v.begin(), v.end());
            const int keys = pos + 1;
            const double scl = 1.0 / std::sqrt(static_cast<double>(hd));
            std::vector<double> weights(static_cast<size_t>(keys));
            for (int h = 0; h < cfg_.heads; ++h) {
                const int off = h * hd;
                double mx = -std::numeric_limits<double>::infinity();
                for (int t = 0; t < keys; ++t) {
                    double acc = 0.0;
                    const double* kt = ck.data() + static_cast<size_t>(t) * d + off;
                    for (int c = 0; c < hd; ++c) acc += q[static_cast<size_t>(off + c)] * kt[c];
                    weights[static_cast<size_t>(t)] = acc;
                    mx = std::max(mx, scl * acc);
                }
                double z = 0.0;
                for (int t = 0; t < keys; ++t) {
                    weights[static_cast<size_t>(t)] = std::exp(scl * weights[static_cast<size_t>(t)] - mx);
                    z += weights[static_cast<size_t>(t)];
                }
                for (int t = 0; t < keys; ++t) weights[static_cast<size_t>(t)] /= z;
                for (int c = 0; c < hd; ++c) tmp[static_cast<size_t>(off + c)] = 0.0;
                for (int t = 0; t < keys; ++t) {
                    const double w = weights[static_cast<size_t>(t)];
                    const double* vt = cv.data() + static_cast<size_t>(t) * d + off;
                    if (w == 0.0) continue;
                    for (int c = 0; c < hd; ++c) tmp[static_cast<size_t>(off + c)] += w * vt[c];
                }
            }
            row_matmul(tmp.data(), params_.get(p + "attn.wo"), attn_out.data());
            for (int j = 0; j < d; ++j) x[static_cast<size_t>(j)] += attn_out[static_cast<size_t>(j)];

            row_layernorm(x.data(), xn.data(), params_.get(p + "ln2.g"), params_.get(p + "ln2.b"));
            const Tensor& w1 = params_.get(p + "mlp.w1");
            const Tensor& b1 = params_.get(p + "mlp.b1");
            const Tensor& w2 = params_.get(p + "mlp.w2");
            const Tensor& b2 = params_.get(p + "mlp.b2");
            std::vector<double> h1(static_cast<size_t>(4 * d));
            row_matmul_any(xn.data(), w1, h1.data());
            for (int j = 0; j < 4 * d; ++j) {
                double u = h1[static_cast<size_t>(j)] + b1.data()[static_cast<size_t>(j)];
                constexpr double kA = 0.7978845608028654;
                constexpr double kB = 0.044715;
                h1[static_cast<size_t>(j)] = 0.5 * u * (1.0 + std::tanh(kA * (u + kB * u * u * u)));
            }
            std::vector<double> h2(static_cast<size_t>(d));
            row_matmul_any(h1.data(), w2, h2.data());
            for (int j = 0; j < d; ++j)
                x[static_cast<size_t>(j)] += h2[static_cast<size_t>(j)] + b2.data()[static_cast<size_t>(j)];

            // taps expose the block output; injections add after the block
            if (inject && std::find(cfg_.taps.begin(), cfg_.taps.end(), i) != cfg_.taps.end()) {
                std::vector<double> add_row(static_cast<size_t>(d), 0.0);
                (*inject)(i, x.data(), add_row.data());
                for (int j = 0; j < d; ++j) x[static_cast<size_t>(j)] += add_row[static_cast<size_t>(j)];
            }
        }
        cache.length = pos + 1;
        row_layernorm(x.data(), xn.data(), params_.get("lnf.g"), params_.get("lnf.b"));
        std::vector<double> logits(static_cast<size_t>(cfg_.vocab_size));
        row_matmul_any(xn.data(), params_.get("head"), logits.data());
        return logits;
    }

    size_t parameter_count() const { return params_.total_entries(); }

private:
    Tensor block(int i, const Tensor& x_in, KvCache* cache) const {
        std::string p = "l" + std::to_string(i) + ".";
        const int d = cfg_.dim;
        const int hd = d / cfg_.heads;
        Tensor xn = layernorm(x_in, params_.get(p + "ln1.g"), params_.get(p + "ln1.b"));
        Tensor q = matmul(xn, params_.get(p + "attn.wq"));
        Tensor k = matmul(xn, params_.get(p + "attn.wk"));
        Tensor v = matmul(xn, params_.get(p + "attn.wv"));
        if (cache) {
            cache->k[static_cast<size_t>(i - 1)].assign(k.data().begin(), k.data().end());
            cache->v[static_cast<size_t>(i - 1)].assign(v.data().begin(), v.data().end());
        }
        std::vector<Tensor> head_outs;
        for (int h = 0; h < cfg_.heads; ++h) {
            Tensor qh = slice_cols(q, h * hd, (h + 1) * hd);
            Tensor kh = slice_cols(k, h * hd, (h + 1) * hd);
            Tensor vh = slice_cols(v, h * hd, (h + 1) * hd);
            Tensor scores = causal_mask(matmul_nt(qh, kh));
            Tensor attn = softmax_rows(scores, 1.0 / std::sqrt(static_cast<double>(hd)));
            head_outs.push_back(matmul(attn, vh));
        }
        Tensor attn_out = matmul(concat_cols(head_outs), params_.get(p + "attn.wo"));
        Tensor x = add(x_in, attn_out);
        Tensor x2 = layernorm(x, params_.get(p + "ln2.g"), params_.get(p + "ln2.b"));
        Tensor h1 = gelu(add_bias(matmul(x2, params_.get(p + "mlp.w1")), params_.get(p + "mlp.b1")));
        Tensor mlp = add_bias(matmul(h1, params_.get(p + "mlp.w2")), params_.get(p + "mlp.b2"));
        return add(x, mlp);
    }

    // row (1,d) x matrix (d,n) with the same accumulation order as mm_nn.
    void row_matmul(const double* row, const Tensor& w, double* out) const {
        row_matmul_any(row, w, out);
    }
    static void row_matmul_any(const double* row, const Tensor& w, double* out) {
        const int k = w.shape()[0], n = w.shape()[1];
        for (int j = 0; j < n; ++j) out[j] = 0.0;
        const double* wd = w.data().data();
        for (int p = 0; p < k; ++p) {
            double a = row[p];
            if (a == 0.0) continue;
            const double* wp = wd + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) out[j] += a * wp[j];
        }
    }
    static void row_layernorm(const double* row, double* out, const Tensor& g, const Tensor& b,
                              double eps = 1e-5) {
        const int n = static_cast<int>(g.size());
        double mu = 0.0;
        for (int j = 0; j < n; ++j) mu += row[j];
        mu /= n;
        double var = 0.0;
        for (int j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= n;
        double rs = 1.0 / std::sqrt(var + eps);
        for (int j = 0; j < n; ++j)
            out[j] = g.data()[static_cast<size_t>(j)] * (row[j] - mu) * rs +
                     b.data()[static_cast<size_t>(j)];
    }

    ModelConfig cfg_;
    ParamStore params_;
};

// Cosine decay from lr to zero across total steps; step counts from zero.
inline double cosine_lr(double lr, int step, int total_steps) {
    if (total_steps <= 1) return lr;
    double t = static_cast<double>(step) / static_cast<double>(total_steps);
    return lr * 0.5 * (1.0 + std::cos(3.141592653589793 * t));
}

}  // namespace worldfuse
