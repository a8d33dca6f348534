// First-order meta-learning of the composer: inner SGD loops on sampled
// world-model subsets (composer parameters only; every model stays frozen),
// outer interpolation of the adapted copies back into the meta-parameters,
// plus few-shot test-time adaptation on target-domain demonstrations.
#pragma once

#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "compound.hpp"
#include "world_model.hpp"

namespace worldfuse {

struct MetaConfig {
    int meta_update_steps = 8;
    int inner_loop_steps = 30;
    double alpha = 0.05;  // inner learning rate
    double beta = 0.1;    // outer learning rate
    int batch_size = 4;
    int subsets_per_step = 4;
    int subset_min = 1;
    int subset_max = 3;
    bool cosine_inner = true;  // cosine schedule across the inner loop
    int threads = 0;

    void validate() const {
        if (meta_update_steps < 1 || inner_loop_steps < 0 || batch_size < 1 ||
            subsets_per_step < 1)
            throw config_error("meta config: counts must be positive");
        if (!(alpha >= 0.0)) throw config_error("meta config: alpha must be nonnegative");
        if (!(beta > 0.0 && beta <= 1.0)) throw config_error("meta config: beta must be in (0,1]");
        if (subset_min < 1 || subset_min > subset_max)
            throw config_error("meta config: bad subset size range");
    }
};

struct SubsetTask {
    std::vector<const WorldModelHandle*> models;  // sorted by id
    std::vector<const SeqExample*> pool;          // union of the members' pairs
};

using DomainPools = std::map<std::string, std::vector<SeqExample>>;

// Sizes uniform over [size_min, size_max]; membership uniform without
// replacement. Deterministic in seed.
inline std::vector<SubsetTask> sample_subsets(const std::vector<const WorldModelHandle*>& models,
                                              const DomainPools& pools, int m, int size_min,
                                              int size_max, uint64_t seed) {
    if (models.empty()) throw argument_error("sample_subsets: empty model pool");
    int n = static_cast<int>(models.size());
    if (size_min < 1 || size_min > size_max || size_max > n)
        throw argument_error("sample_subsets: size range outside [1, " + std::to_string(n) + "]");
    Rng rng(derive_seed(seed, "subsets"));
    std::vector<SubsetTask> out;
    for (int j = 0; j < m; ++j) {
        int size = size_min + rng.uniform_int(size_max - size_min + 1);
        std::vector<int> idx = rng.sample_without_replacement(n, size);
        SubsetTask task;
        for (int i : idx) task.models.push_back(models[static_cast<size_t>(i)]);
        std::sort(task.models.begin(), task.models.end(),
                  [](const WorldModelHandle* a, const WorldModelHandle* b) { return a->id < b->id; });
        for (const auto* w : task.models) {
            auto it = pools.find(w->domain_id);
            if (it == pools.end())
                throw argument_error("sample_subsets: no dataset for domain " + w->domain_id);
            for (const auto& ex : it->second) task.pool.push_back(&ex);
        }
        if (task.pool.empty()) throw argument_error("sample_subsets: empty union dataset");
        out.push_back(std::move(task));
    }
    return out;
}

namespace detail {

inline Tensor composed_batch_loss(const ComposedPolicy& p,
                                  const std::vector<const SeqExample*>& batch) {
    std::vector<Tensor> losses;
    for (const SeqExample* ex : batch) {
        ComposeOutput out = compose_forward(p, ex->tokens, static_cast<int>(ex->prompt_len));
        losses.push_back(cross_entropy(out.logits, ex->targets, ex->mask));
    }
    Tensor total = losses[0];
    for (size_t i = 1; i < losses.size(); ++i) total = add(total, losses[i]);
    return scale(total, 1.0 / static_cast<double>(losses.size()));
}

}  // namespace detail

// Adapts a private copy of the composer to one subset task. Only the composer
// parameters move; world and reasoning models are frozen by construction.
inline double inner_loop(CompoundAttention& theta_j, const ReasoningModel& rm,
                         const SubsetTask& task, double alpha, int lambda_i, int batch_size,
                         uint64_t seed, CompoundAttention::Fusion fusion, TapCache* cache,
                         bool cosine) {
    for (const auto* w : task.models)
        if (!w->model->params().frozen())
            throw contract_error("inner_loop: world models must be frozen");
    if (!rm.model->params().frozen())
        throw contract_error("inner_loop: reasoning model must be frozen");
    ComposedPolicy policy = ComposedPolicy::make(rm, task.models, theta_j, fusion, cache);
    Rng rng(derive_seed(seed, "inner"));
    double last = 0.0;
    for (int it = 0; it < lambda_i; ++it) {
        std::vector<const SeqExample*> batch;
        for (int b = 0; b < batch_size; ++b)
            batch.push_back(task.pool[static_cast<size_t>(
                rng.uniform_int(static_cast<int>(task.pool.size())))]);
        Tensor loss = detail::composed_batch_loss(policy, batch);
        last = loss.value();
        if (!std::isfinite(last)) throw training_error("inner_loop: non-finite loss");
        double lr = cosine ? cosine_lr(alpha, it, lambda_i) : alpha;
        if (lr > 0.0) sgd_step(theta_j.params(), backward(loss, theta_j.params()), lr);
    }
    return last;
}

// theta <- theta + beta * mean_j (theta_j - theta), elementwise. Displacements
// are all taken against the incoming theta.
inline void outer_update(CompoundAttention& theta,
                         const std::vector<const CompoundAttention*>& adapted, double beta) {
    if (adapted.empty()) throw argument_error("outer_update: no adapted parameters");
    double inv_m = 1.0 / static_cast<double>(adapted.size());
    for (auto& [name, t] : theta.params()) {
        auto dst = t.mutable_data();
        std::vector<double> delta(dst.size(), 0.0);
        for (const CompoundAttention* a : adapted) {
            const Tensor& src = a->params().get(name);
            if (src.shape() != t.shape())
                throw dimension_error("outer_update: shape mismatch for " + name);
            auto sd = src.data();
            for (size_t i = 0; i < dst.size(); ++i) delta[i] += sd[i] - dst[i];
        }
        for (size_t i = 0; i < dst.size(); ++i) dst[i] += beta * inv_m * delta[i];
    }
}

struct MetaRunInfo {
    uint64_t seed = 0;
    std::string theta_hash;
    std::vector<double> final_inner_losses;  // last inner loss per (step, subset)
};

// The full meta loop: per meta step, sample subsets, adapt private copies in
// parallel, reduce into the meta-parameters in subset order.
inline MetaRunInfo meta_train(CompoundAttention& theta,
                              const std::vector<const WorldModelHandle*>& models,
                              const DomainPools& pools, const ReasoningModel& rm,
                              const MetaConfig& cfg, uint64_t seed,
                              CompoundAttention::Fusion fusion =
                                  CompoundAttention::Fusion::Hierarchical,
                              TapCache* cache = nullptr) {
    cfg.validate();
    MetaRunInfo info;
    info.seed = seed;
    for (int step = 0; step < cfg.meta_update_steps; ++step) {
        std::vector<SubsetTask> tasks =
            sample_subsets(models, pools, cfg.subsets_per_step, cfg.subset_min, cfg.subset_max,
                           derive_seed(derive_seed(seed, "meta"), static_cast<uint64_t>(step)));
        std::vector<CompoundAttention> adapted;
        adapted.reserve(tasks.size());
        for (size_t j = 0; j < tasks.size(); ++j) adapted.push_back(theta.clone());
        std::vector<double> losses(tasks.size(), 0.0);
        parallel_for(
            tasks.size(),
            [&](size_t j) {
                losses[j] = inner_loop(adapted[j], rm, tasks[j], cfg.alpha, cfg.inner_loop_steps,
                                       cfg.batch_size,
                                       derive_seed(derive_seed(seed, static_cast<uint64_t>(step)),
                                                   static_cast<uint64_t>(j)),
                                       fusion, cache, cfg.cosine_inner);
            },
            cfg.threads);
        std::vector<const CompoundAttention*> ptrs;
        for (const auto& a : adapted) ptrs.push_back(&a);
        outer_update(theta, ptrs, cfg.beta);
        for (double l : losses) info.final_inner_losses.push_back(l);
    }
    info.theta_hash = theta.hash_hex();
    return info;
}

// Few-shot test-time adaptation: fine-tunes the composer only, on cloning
// loss over target-domain demonstrations; composition per demo state uses the
// standard retrieval path.
inline void few_shot_adapt(CompoundAttention& theta, const ReasoningModel& rm,
                           const std::vector<WorldModelHandle>& pool,
                           const std::vector<Trajectory>& demos, int top_k, int k_prototypes,
                           double lr, int steps, uint64_t seed,
                           CompoundAttention::Fusion fusion =
                               CompoundAttention::Fusion::Hierarchical,
                           TapCache* cache = nullptr) {
    if (demos.empty()) throw argument_error("few_shot_adapt: no demonstrations");
    struct Item {
        SeqExample ex;
        std::vector<const WorldModelHandle*> worlds;
    };
    std::vector<Item> items;
    for (const auto& demo : demos)
        for (const auto& s : demo.steps) {
            Item it;
            it.ex = seq::cloning_example(demo.instruction, s.before, s.action, demo.domain_id);
            it.worlds = retrieve_for_state(pool, s.before, top_k, k_prototypes);
            items.push_back(std::move(it));
        }
    if (items.empty()) throw argument_error("few_shot_adapt: demonstrations contain no steps");

    Rng rng(derive_seed(seed, "few-shot"));
    for (int step = 0; step < steps; ++step) {
        const Item& it = items[static_cast<size_t>(rng.uniform_int(static_cast<int>(items.size())))];
        ComposedPolicy p = ComposedPolicy::make(rm, it.worlds, theta, fusion, cache);
        ComposeOutput out = compose_forward(p, it.ex.tokens, static_cast<int>(it.ex.prompt_len));
        Tensor loss = cross_entropy(out.logits, it.ex.targets, it.ex.mask);
        if (!std::isfinite(loss.value())) throw training_error("few_shot_adapt: non-finite loss");
        if (lr > 0.0) sgd_step(theta.params(), backward(loss, theta.params()), lr);
    }
}

// Reproducibility manifest for a meta run.
inline nlohmann::json meta_manifest(const MetaConfig& cfg, const MetaRunInfo& info,
                                    const std::vector<const WorldModelHandle*>& models,
                                    const ReasoningModel& rm) {
    nlohmann::json j;
    j["seed"] = info.seed;
    j["theta_hash"] = info.theta_hash;
    j["config"] = {{"meta_update_steps", cfg.meta_update_steps},
                   {"inner_loop_steps", cfg.inner_loop_steps},
                   {"alpha", cfg.alpha},
                   {"beta", cfg.beta},
                   {"batch_size", cfg.batch_size},
                   {"subsets_per_step", cfg.subsets_per_step},
                   {"subset_min", cfg.subset_min},
                   {"subset_max", cfg.subset_max},
                   {"cosine_inner", cfg.cosine_inner}};
    j["reasoning_hash"] = rm.checkpoint_hash_hex();
    nlohmann::json wm = nlohmann::json::array();
    for (const auto* w : models)
        wm.push_back({{"id", w->id}, {"hash", w->checkpoint_hash_hex()}});
    j["world_models"] = wm;
    j["final_inner_losses"] = info.final_inner_losses;
    return j;
}

}  // namespace worldfuse
