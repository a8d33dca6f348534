// The trainable composer: per tap pair, a shared linear projection of world
// tap outputs into the reasoning width, world-level cross-attention weighing
// the models against each other, and an alignment cross-attention injecting
// the integrated representation residually into the reasoning stream. World
// models encode the prompt segment only; their parameter cost is constant in
// the number of composed models. Concat/Add fusions are the ablation variants.
#pragma once

#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <unordered_map>
#include <vector>

#include "checkpoint.hpp"
#include "model.hpp"
#include "reasoning.hpp"
#include "tensor.hpp"
#include "world_model.hpp"

namespace worldfuse {

struct CompoundConfig {
    int world_dim = 32;
    int reason_dim = 64;
    int attn_dim = 64;  // query/key width of both attention levels
    int heads = 1;
    std::vector<int> world_taps;   // tap layers in the world models
    std::vector<int> reason_taps;  // tap layers in the reasoning model
    double init_sigma = 0.02;

    void validate() const {
        if (world_dim < 1 || reason_dim < 1 || attn_dim < 1 || heads < 1)
            throw config_error("compound config: sizes must be positive");
        if (world_taps.size() != reason_taps.size() || world_taps.empty())
            throw config_error("compound config: tap lists must be nonempty and equal length");
        if (attn_dim % heads != 0 || reason_dim % heads != 0)
            throw config_error("compound config: head count must divide widths");
    }

    std::map<std::string, std::string> to_meta() const {
        auto join = [](const std::vector<int>& v) {
            std::string s;
            for (size_t i = 0; i < v.size(); ++i) {
                if (i) s += ",";
                s += std::to_string(v[i]);
            }
            return s;
        };
        return {{"world_dim", std::to_string(world_dim)},
                {"reason_dim", std::to_string(reason_dim)},
                {"attn_dim", std::to_string(attn_dim)},
                {"heads", std::to_string(heads)},
                {"world_taps", join(world_taps)},
                {"reason_taps", join(reason_taps)}};
    }

    static CompoundConfig from_meta(const std::map<std::string, std::string>& meta) {
        auto split_ints = [](const std::string& s) {
            std::vector<int> out;
            size_t pos = 0;
            while (pos < s.size()) {
                size_t comma = s.find(',', pos);
                if (comma == std::string::npos) comma = s.size();
                out.push_back(std::stoi(s.substr(pos, comma - pos)));
                pos = comma + 1;
            }
            return out;
        };
        CompoundConfig c;
        c.world_dim = std::stoi(meta.at("world_dim"));
        c.reason_dim = std::stoi(meta.at("reason_dim"));
        c.attn_dim = std::stoi(meta.at("attn_dim"));
        c.heads = std::stoi(meta.at("heads"));
        c.world_taps = split_ints(meta.at("world_taps"));
        c.reason_taps = split_ints(meta.at("reason_taps"));
        return c;
    }
};

// Multi-head cross-attention over full matrices; per-head widths are column
// slices. Returns the per-head softmax weights for attention bookkeeping.
struct CrossAttnResult {
    Tensor output;                // (S_q, d_v)
    std::vector<Tensor> weights;  // per head, (S_q, S_k)
};

inline CrossAttnResult cross_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                       int heads) {
    int da = q.dim(1), dv = v.dim(1);
    if (k.dim(1) != da) throw dimension_error("cross_attention: query/key width mismatch");
    if (k.dim(0) != v.dim(0)) throw dimension_error("cross_attention: key/value rows mismatch");
    if (da % heads != 0 || dv % heads != 0)
        throw dimension_error("cross_attention: heads must divide widths");
    int hq = da / heads, hv = dv / heads;
    CrossAttnResult out;
    std::vector<Tensor> outs;
    for (int h = 0; h < heads; ++h) {
        Tensor qh = heads == 1 ? q : slice_cols(q, h * hq, (h + 1) * hq);
        Tensor kh = heads == 1 ? k : slice_cols(k, h * hq, (h + 1) * hq);
        Tensor vh = heads == 1 ? v : slice_cols(v, h * hv, (h + 1) * hv);
        Tensor w = softmax_rows(matmul_nt(qh, kh), 1.0 / std::sqrt(static_cast<double>(hq)));
        out.weights.push_back(w);
        outs.push_back(matmul(w, vh));
    }
    out.output = heads == 1 ? outs[0] : concat_cols(outs);
    return out;
}

// Raw key/value matrices one tap pair exposes for incremental decoding.
struct TapDecodeState {
    int rows = 0;
    std::vector<double> k;  // rows x attn_dim
    std::vector<double> v;  // rows x reason_dim
};

class CompoundAttention {
public:
    enum class Fusion { Hierarchical, Concat, Add };

    CompoundAttention(CompoundConfig cfg, uint64_t seed) : cfg_(std::move(cfg)) {
        cfg_.validate();
        Rng rng(derive_seed(seed, "compound-init"));
        // Width-scaled initialization: the projected world stream starts at
        // the magnitude of the reasoning stream it must inform, and the
        // query/key maps start with differentiated (not washed-out) attention.
        // The value path stays zero so composition begins as an exact no-op.
        const double proj_sigma = 1.0 / std::sqrt(static_cast<double>(cfg_.world_dim));
        const double qk_sigma =
            cfg_.init_sigma > 0 ? std::max(cfg_.init_sigma,
                                           1.0 / std::sqrt(static_cast<double>(cfg_.reason_dim)))
                                : 1.0 / std::sqrt(static_cast<double>(cfg_.reason_dim));
        for (size_t t = 0; t < cfg_.reason_taps.size(); ++t) {
            std::string p = "t" + std::to_string(t) + ".";
            params_.add(p + "proj.w",
                        Tensor::parameter_randn({cfg_.world_dim, cfg_.reason_dim}, rng, proj_sigma));
            params_.add(p + "proj.b", Tensor::parameter({cfg_.reason_dim},
                            std::vector<double>(static_cast<size_t>(cfg_.reason_dim), 0.0)));
            params_.add(p + "world_q",
                        Tensor::parameter_randn({cfg_.reason_dim, cfg_.attn_dim}, rng, qk_sigma));
            params_.add(p + "world_k",
                        Tensor::parameter_randn({cfg_.reason_dim, cfg_.attn_dim}, rng, qk_sigma));
            params_.add(p + "align_q",
                        Tensor::parameter_randn({cfg_.reason_dim, cfg_.attn_dim}, rng, qk_sigma));
            params_.add(p + "align_k",
                        Tensor::parameter_randn({cfg_.reason_dim, cfg_.attn_dim}, rng, qk_sigma));
            // zero value path: the composition starts as an exact no-op
            params_.add(p + "align_v", Tensor::parameter({cfg_.reason_dim, cfg_.reason_dim},
                            std::vector<double>(static_cast<size_t>(cfg_.reason_dim) *
                                                    static_cast<size_t>(cfg_.reason_dim), 0.0)));
        }
    }

    CompoundAttention(CompoundConfig cfg, ParamStore params)
        : cfg_(std::move(cfg)), params_(std::move(params)) {
        cfg_.validate();
    }

    static CompoundAttention from_checkpoint(const Checkpoint& ck) {
        return CompoundAttention(CompoundConfig::from_meta(ck.meta), ck.params.clone());
    }

    const CompoundConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }

    CompoundAttention clone() const { return CompoundAttention(cfg_, params_.clone()); }

    std::string hash_hex() const { return checkpoint_hash(params_, cfg_.to_meta()); }

    int pair_count() const { return static_cast<int>(cfg_.reason_taps.size()); }

    int pair_for_reason_layer(int layer) const {
        for (size_t t = 0; t < cfg_.reason_taps.size(); ++t)
            if (cfg_.reason_taps[t] == layer) return static_cast<int>(t);
        return -1;
    }

    Tensor project(int pair, const Tensor& l_world) const {
        std::string p = "t" + std::to_string(pair) + ".";
        return add_bias(matmul(l_world, params_.get(p + "proj.w")), params_.get(p + "proj.b"));
    }

    struct WorldAttn {
        Tensor output;                            // (S_q, reason_dim)
        std::vector<std::vector<double>> masses;  // [model][query row], head-averaged
    };

    // Queries from the reasoning stream; keys over the sequence-axis
    // concatenation of the projected world streams; values the concatenation
    // itself. Per-model mass is the softmax weight landing on that model's
    // block, summing to one at every query row.
    WorldAttn world_level(int pair, const Tensor& l_reason_q,
                          const std::vector<Tensor>& projected) const {
        if (projected.empty()) throw argument_error("world_level: empty composition");
        std::string p = "t" + std::to_string(pair) + ".";
        Tensor q = matmul(l_reason_q, params_.get(p + "world_q"));
        Tensor cat = projected.size() == 1 ? projected[0] : concat_rows(projected);
        Tensor k = matmul(cat, params_.get(p + "world_k"));
        CrossAttnResult res = cross_attention(q, k, cat, cfg_.heads);

        WorldAttn out;
        out.output = res.output;
        int s_q = l_reason_q.dim(0);
        int block = projected[0].dim(0);
        out.masses.assign(projected.size(),
                          std::vector<double>(static_cast<size_t>(s_q), 0.0));
        for (const Tensor& w : res.weights) {
            for (int row = 0; row < s_q; ++row)
                for (size_t m = 0; m < projected.size(); ++m) {
                    double acc = 0.0;
                    for (int c = 0; c < block; ++c)
                        acc += w.at(row, static_cast<int>(m) * block + c);
                    out.masses[m][static_cast<size_t>(row)] += acc / cfg_.heads;
                }
        }
        return out;
    }

    // Aligns the integrated world representation to the reasoning stream:
    // queries from the full reasoning stream, keys from the summed projected
    // streams, values from the world-level output.
    Tensor reasoning_level(int pair, const Tensor& l_reason_full,
                           const std::vector<Tensor>& projected, const Tensor& integrated) const {
        std::string p = "t" + std::to_string(pair) + ".";
        Tensor sum_proj = projected[0];
        for (size_t m = 1; m < projected.size(); ++m) sum_proj = add(sum_proj, projected[m]);
        Tensor q = matmul(l_reason_full, params_.get(p + "align_q"));
        Tensor k = matmul(sum_proj, params_.get(p + "align_k"));
        Tensor v = matmul(integrated, params_.get(p + "align_v"));
        return cross_attention(q, k, v, cfg_.heads).output;
    }

    // Full injection for one tap pair. `l_reason_full` may extend past the
    // prompt during decoding; world streams cover the prompt only, so the
    // world-level queries are restricted to prompt rows.
    Tensor injection(int pair, Fusion fusion, const Tensor& l_reason_full, int prompt_len,
                     const std::vector<Tensor>& world_taps,
                     std::vector<std::vector<double>>* masses_out = nullptr,
                     TapDecodeState* decode_state = nullptr) const {
        if (world_taps.empty()) throw argument_error("injection: empty composition");
        int s_full = l_reason_full.dim(0);
        if (prompt_len < 1 || prompt_len > s_full)
            throw dimension_error("injection: prompt length out of range");
        std::string p = "t" + std::to_string(pair) + ".";

        std::vector<Tensor> projected;
        projected.reserve(world_taps.size());
        for (const Tensor& w : world_taps) {
            if (w.dim(0) != prompt_len)
                throw dimension_error("injection: world stream length differs from prompt");
            projected.push_back(project(pair, w));
        }

        Tensor k_mat, v_mat;
        if (fusion == Fusion::Hierarchical) {
            Tensor l_prompt = prompt_len == s_full ? l_reason_full
                                                   : slice_rows(l_reason_full, 0, prompt_len);
            WorldAttn wa = world_level(pair, l_prompt, projected);
            if (masses_out) *masses_out = wa.masses;
            Tensor sum_proj = projected[0];
            for (size_t m = 1; m < projected.size(); ++m) sum_proj = add(sum_proj, projected[m]);
            k_mat = matmul(sum_proj, params_.get(p + "align_k"));
            v_mat = matmul(wa.output, params_.get(p + "align_v"));
        } else if (fusion == Fusion::Concat) {
            Tensor cat = projected.size() == 1 ? projected[0] : concat_rows(projected);
            k_mat = matmul(cat, params_.get(p + "align_k"));
            v_mat = matmul(cat, params_.get(p + "align_v"));
        } else {
            Tensor sum_proj = projected[0];
            for (size_t m = 1; m < projected.size(); ++m) sum_proj = add(sum_proj, projected[m]);
            k_mat = matmul(sum_proj, params_.get(p + "align_k"));
            v_mat = matmul(sum_proj, params_.get(p + "align_v"));
        }
        if (decode_state) {
            decode_state->rows = k_mat.dim(0);
            decode_state->k.assign(k_mat.data().begin(), k_mat.data().end());
            decode_state->v.assign(v_mat.data().begin(), v_mat.data().end());
        }
        Tensor q = matmul(l_reason_full, params_.get(p + "align_q"));
        return cross_attention(q, k_mat, v_mat, cfg_.heads).output;
    }

    // Injection row for a decode position, against the cached key/value
    // matrices. Mirrors the graph path arithmetic exactly.
    void injection_row(int pair, const TapDecodeState& st, const double* l_row,
                       double* add_into) const {
        std::string p = "t" + std::to_string(pair) + ".";
        const Tensor& rq = params_.get(p + "align_q");
        const int da = cfg_.attn_dim, dv = cfg_.reason_dim;
        std::vector<double> q(static_cast<size_t>(da), 0.0);
        {
            const double* w = rq.data().data();
            const int d_in = rq.shape()[0];
            for (int i = 0; i < d_in; ++i) {
                double a = l_row[i];
                if (a == 0.0) continue;
                const double* wp = w + static_cast<size_t>(i) * da;
                for (int j = 0; j < da; ++j) q[static_cast<size_t>(j)] += a * wp[j];
            }
        }
        const int heads = cfg_.heads, hq = da / heads, hv = dv / heads;
        std::vector<double> weights(static_cast<size_t>(st.rows));
        for (int h = 0; h < heads; ++h) {
            const double scl = 1.0 / std::sqrt(static_cast<double>(hq));
            double mx = -std::numeric_limits<double>::infinity();
            for (int t = 0; t < st.rows; ++t) {
                double acc = 0.0;
                const double* kt = st.k.data() + static_cast<size_t>(t) * da + h * hq;
                for (int c = 0; c < hq; ++c) acc += q[static_cast<size_t>(h * hq + c)] * kt[c];
                weights[static_cast<size_t>(t)] = acc;
                mx = std::max(mx, scl * acc);
            }
            double z = 0.0;
            for (int t = 0; t < st.rows; ++t) {
                weights[static_cast<size_t>(t)] = std::exp(scl * weights[static_cast<size_t>(t)] - mx);
                z += weights[static_cast<size_t>(t)];
            }
            for (int t = 0; t < st.rows; ++t) weights[static_cast<size_t>(t)] /= z;
            for (int c = 0; c < hv; ++c) add_into[h * hv + c] = 0.0;
            for (int t = 0; t < st.rows; ++t) {
                double w = weights[static_cast<size_t>(t)];
                if (w == 0.0) continue;
                const double* vt = st.v.data() + static_cast<size_t>(t) * dv + h * hv;
                for (int c = 0; c < hv; ++c) add_into[h * hv + c] += w * vt[c];
            }
        }
    }

private:
    CompoundConfig cfg_;
    ParamStore params_;
};

// ---------------------------------------------------------------------------
// Composed policy
// ---------------------------------------------------------------------------

// Cache of world tap encodings keyed on (model, prompt tokens). Values are
// detached constants; safe to share across threads.
class TapCache {
public:
    using TapMap = std::map<int, Tensor>;

    std::shared_ptr<const TapMap> get_or_compute(const Transformer& model,
                                                 const std::vector<int>& tokens) {
        const void* model_addr = &model;
        uint64_t key = fnv1a64(tokens.data(), tokens.size() * sizeof(int),
                               fnv1a64(&model_addr, sizeof(model_addr)));
        {
            std::lock_guard<std::mutex> lk(mu_);
            auto it = map_.find(key);
            if (it != map_.end()) return it->second;
        }
        autodiff::NoGradGuard ng;
        auto taps = std::make_shared<TapMap>();
        model.forward(tokens, taps.get());
        std::lock_guard<std::mutex> lk(mu_);
        if (map_.size() >= cap_) map_.clear();
        map_[key] = taps;
        return taps;
    }

private:
    std::mutex mu_;
    std::unordered_map<uint64_t, std::shared_ptr<const TapMap>> map_;
    size_t cap_ = 8192;
};

struct ComposedPolicy {
    const ReasoningModel* reasoning = nullptr;
    std::vector<const WorldModelHandle*> worlds;  // sorted by id
    const CompoundAttention* cattn = nullptr;
    CompoundAttention::Fusion fusion = CompoundAttention::Fusion::Hierarchical;
    TapCache* tap_cache = nullptr;

    static ComposedPolicy make(const ReasoningModel& rm,
                               std::vector<const WorldModelHandle*> ws,
                               const CompoundAttention& ca,
                               CompoundAttention::Fusion fusion =
                                   CompoundAttention::Fusion::Hierarchical,
                               TapCache* cache = nullptr) {
        if (ws.empty()) throw argument_error("composed policy: no world models");
        for (const auto* w : ws)
            if (w->model->config().vocab_size != rm.model->config().vocab_size)
                throw config_error("composed policy: tokenizer mismatch");
        // shared order for concatenation and summation: sorted by model id
        std::sort(ws.begin(), ws.end(), [](const WorldModelHandle* a, const WorldModelHandle* b) {
            return a->id < b->id;
        });
        ComposedPolicy p;
        p.reasoning = &rm;
        p.worlds = std::move(ws);
        p.cattn = &ca;
        p.fusion = fusion;
        p.tap_cache = cache;
        return p;
    }
};

struct ComposeOutput {
    Tensor logits;
    // mean world-level mass per composed model (policy order), averaged over
    // tap pairs, heads and prompt rows; empty for non-hierarchical fusion
    std::vector<double> mean_masses;
};

namespace detail {

inline std::vector<std::shared_ptr<const TapCache::TapMap>> world_tap_maps(
    const ComposedPolicy& p, const std::vector<int>& prompt) {
    std::vector<std::shared_ptr<const TapCache::TapMap>> out;
    for (const auto* w : p.worlds) {
        if (p.tap_cache) {
            out.push_back(p.tap_cache->get_or_compute(*w->model, prompt));
        } else {
            autodiff::NoGradGuard ng;
            auto taps = std::make_shared<TapCache::TapMap>();
            w->model->forward(prompt, taps.get());
            out.push_back(std::move(taps));
        }
    }
    return out;
}

}  // namespace detail

// Forward pass of the composed policy. World models encode tokens[0,
// prompt_len) once; the reasoning model runs over all of `tokens` with
// injections at its tap layers. Optionally exports per-tap decode state and a
// K/V cache for incremental decoding.
inline ComposeOutput compose_forward(const ComposedPolicy& p, const std::vector<int>& tokens,
                                     int prompt_len, KvCache* cache_out = nullptr,
                                     std::vector<TapDecodeState>* decode_states = nullptr) {
    if (prompt_len < 1 || prompt_len > static_cast<int>(tokens.size()))
        throw argument_error("compose_forward: prompt length out of range");
    std::vector<int> prompt(tokens.begin(), tokens.begin() + prompt_len);
    auto tap_maps = detail::world_tap_maps(p, prompt);

    const CompoundConfig& cc = p.cattn->config();
    if (decode_states) decode_states->assign(static_cast<size_t>(p.cattn->pair_count()), {});

    std::vector<std::vector<std::vector<double>>> masses_per_pair(
        static_cast<size_t>(p.cattn->pair_count()));
    TapInjection inject = [&](int layer, const Tensor& tap) -> Tensor {
        int pair = p.cattn->pair_for_reason_layer(layer);
        if (pair < 0) return Tensor();
        std::vector<Tensor> world_taps;
        for (size_t m = 0; m < p.worlds.size(); ++m)
            world_taps.push_back(tap_maps[m]->at(cc.world_taps[static_cast<size_t>(pair)]));
        return p.cattn->injection(
            pair, p.fusion, tap, prompt_len, world_taps,
            p.fusion == CompoundAttention::Fusion::Hierarchical
                ? &masses_per_pair[static_cast<size_t>(pair)]
                : nullptr,
            decode_states ? &(*decode_states)[static_cast<size_t>(pair)] : nullptr);
    };

    ComposeOutput out;
    out.logits = p.reasoning->model->forward(tokens, nullptr, inject, cache_out);
    if (p.fusion == CompoundAttention::Fusion::Hierarchical) {
        out.mean_masses.assign(p.worlds.size(), 0.0);
        int pairs = p.cattn->pair_count();
        for (int t = 0; t < pairs; ++t) {
            const auto& masses = masses_per_pair[static_cast<size_t>(t)];
            for (size_t m = 0; m < p.worlds.size(); ++m) {
                double acc = 0.0;
                for (double x : masses[m]) acc += x;
                out.mean_masses[m] += acc / (static_cast<double>(masses[m].size()) * pairs);
            }
        }
    }
    return out;
}

// Incremental decoding session for a composed policy.
class ComposedSession : public DecodeSession {
public:
    explicit ComposedSession(const ComposedPolicy& p) : p_(p) {}

    void prime(const std::vector<int>& prompt) override {
        autodiff::NoGradGuard ng;
        ComposeOutput out =
            compose_forward(p_, prompt, static_cast<int>(prompt.size()), &cache_, &states_);
        last_masses_ = out.mean_masses;
        int last = out.logits.dim(0) - 1;
        pending_.assign(out.logits.data().begin() +
                            static_cast<size_t>(last) * out.logits.dim(1),
                        out.logits.data().end());
    }

    std::vector<double> next_logits() override { return pending_; }

    void accept(int token) override {
        autodiff::NoGradGuard ng;
        RowInjection inject = [&](int layer, const double* row, double* add_into) {
            int pair = p_.cattn->pair_for_reason_layer(layer);
            if (pair < 0) return;
            p_.cattn->injection_row(pair, states_[static_cast<size_t>(pair)], row, add_into);
        };
        pending_ = p_.reasoning->model->decode_step(cache_, token, &inject);
    }

    // world-level masses from the last prime, policy order
    const std::vector<double>& masses() const { return last_masses_; }
    const ComposedPolicy& policy() const { return p_; }

private:
    ComposedPolicy p_;
    KvCache cache_;
    std::vector<TapDecodeState> states_;
    std::vector<double> pending_;
    std::vector<double> last_masses_;
};

// Retrieval plumbing: rank the pool by prototype distance to the state and
// compose the closest K.
inline std::vector<const WorldModelHandle*> retrieve_for_state(
    const std::vector<WorldModelHandle>& pool, const State& st, int top_k, int k_prototypes) {
    std::vector<RetrievalEntry> entries;
    for (const auto& w : pool) entries.push_back({w.id, &w.prototypes});
    EmbeddingSet live = embed_objects(st);
    std::vector<RankedModel> ranked = retrieve_top_k(entries, live, top_k, k_prototypes);
    std::vector<const WorldModelHandle*> out;
    for (const auto& r : ranked)
        for (const auto& w : pool)
            if (w.id == r.id) out.push_back(&w);
    return out;
}

}  // namespace worldfuse
