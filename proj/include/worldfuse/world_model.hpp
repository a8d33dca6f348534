// Domain world models: small decoder sequence models trained on three
// auxiliary tasks (next-state delta prediction, feasible-action sets, behavior
// cloning) with uniformly sampled task kinds, plus tap-layer encoding for
// composition and prototype construction for retrieval.
#pragma once

#include <memory>
#include <set>
#include <string>
#include <vector>

#include "checkpoint.hpp"
#include "model.hpp"
#include "retrieval.hpp"
#include "sim.hpp"
#include "vocab.hpp"

namespace worldfuse {

enum class TaskKind { Dynamics, Affordance, Cloning };

inline const char* task_kind_name(TaskKind k) {
    switch (k) {
        case TaskKind::Dynamics: return "dynamics";
        case TaskKind::Affordance: return "affordance";
        case TaskKind::Cloning: return "cloning";
    }
    return "?";
}

struct AuxiliaryBatch {
    TaskKind kind;
    SeqExample seq;
};

struct DomainDataset {
    std::string domain_id;
    std::vector<std::pair<Scene, std::vector<Trajectory>>> per_scene;

    std::vector<const Trajectory*> all() const {
        std::vector<const Trajectory*> out;
        for (const auto& [scene, trajs] : per_scene)
            for (const auto& t : trajs) out.push_back(&t);
        return out;
    }
    size_t trajectory_count() const {
        size_t n = 0;
        for (const auto& [scene, trajs] : per_scene) n += trajs.size();
        return n;
    }
};

// One batch item per auxiliary task per trajectory step.
inline std::vector<AuxiliaryBatch> make_aux_batches(const Scene& scene, const Trajectory& traj) {
    std::vector<AuxiliaryBatch> out;
    const std::string& prov = traj.domain_id;
    for (const auto& s : traj.steps) {
        out.push_back({TaskKind::Dynamics, seq::dynamics_example(s.before, s.action, s.after, prov)});
        out.push_back({TaskKind::Affordance, seq::affordance_example(scene, s.before, prov)});
        out.push_back({TaskKind::Cloning,
                       seq::cloning_example(traj.instruction, s.before, s.action, prov)});
    }
    return out;
}

struct WorldModelHandle {
    std::string id;
    std::string domain_id;
    std::shared_ptr<Transformer> model;  // frozen after training
    PrototypeSet prototypes;
    std::set<std::string> provenance;  // domain ids whose data trained this model

    std::string checkpoint_hash_hex() const {
        auto meta = model->config().to_meta();
        meta["id"] = id;
        return checkpoint_hash(model->params(), meta);
    }
};

struct EncodeResult {
    Tensor logits;
    std::map<int, Tensor> taps;  // tap layer -> (sequence, dim)
};

inline EncodeResult encode_with_taps(const Transformer& model, const std::vector<int>& tokens) {
    EncodeResult out;
    out.logits = model.forward(tokens, &out.taps);
    return out;
}

struct LmTrainConfig {
    int gradient_steps = 800;
    int batch_size = 4;
    double lr = 2e-3;
    bool cosine = true;
    bool adam = true;  // pretraining default; the meta loop stays plain SGD
    double held_out_fraction = 0.15;
};

struct TrainReport {
    double held_out_before = 0.0;
    double held_out_after = 0.0;
    int steps = 0;
};

namespace detail {

inline Tensor example_loss(const Transformer& model, const SeqExample& ex) {
    Tensor logits = model.forward(ex.tokens);
    return cross_entropy(logits, ex.targets, ex.mask);
}

inline double mean_loss_no_grad(const Transformer& model, const std::vector<SeqExample>& pool,
                                size_t cap = 64) {
    autodiff::NoGradGuard ng;
    double total = 0.0;
    size_t n = std::min(cap, pool.size());
    for (size_t i = 0; i < n; ++i) total += example_loss(model, pool[i]).value();
    return n ? total / static_cast<double>(n) : 0.0;
}

// One optimizer step on the mean loss over a batch of examples.
inline double train_step(Transformer& model, const std::vector<const SeqExample*>& batch,
                         double lr, AdamState* adam) {
    std::vector<Tensor> losses(batch.size());
    parallel_for(batch.size(), [&](size_t i) { losses[i] = example_loss(model, *batch[i]); }, 2);
    Tensor total = losses[0];
    for (size_t i = 1; i < losses.size(); ++i) total = add(total, losses[i]);
    Tensor loss = scale(total, 1.0 / static_cast<double>(losses.size()));
    double value = loss.value();
    if (!std::isfinite(value)) throw training_error("training diverged: non-finite loss");
    GradMap grads = backward(loss, model.params());
    if (adam)
        adam_step(model.params(), grads, *adam, lr);
    else
        sgd_step(model.params(), grads, lr);
    return value;
}

}  // namespace detail

// Mixed-task training: each optimization step draws its task kind uniformly,
// then a batch from that task's pool.
inline TrainReport train_world_model_inplace(Transformer& model, const DomainDataset& dataset,
                                             const LmTrainConfig& cfg, uint64_t seed,
                                             std::set<std::string>* provenance_out = nullptr) {
    if (dataset.trajectory_count() == 0) throw argument_error("train_world_model: empty dataset");
    Rng rng(derive_seed(seed, "wm-train"));

    std::vector<SeqExample> pools[3];
    std::vector<SeqExample> held_out;
    for (const auto& [scene, trajs] : dataset.per_scene) {
        size_t n_held = static_cast<size_t>(std::ceil(cfg.held_out_fraction *
                                                      static_cast<double>(trajs.size())));
        for (size_t i = 0; i < trajs.size(); ++i) {
            bool held = i + n_held >= trajs.size();
            if (held) {
                for (const auto& s : trajs[i].steps)
                    held_out.push_back(seq::cloning_example(trajs[i].instruction, s.before,
                                                            s.action, trajs[i].domain_id));
                continue;
            }
            for (auto& b : make_aux_batches(scene, trajs[i])) {
                if (provenance_out) provenance_out->insert(b.seq.provenance);
                pools[static_cast<size_t>(b.kind)].push_back(std::move(b.seq));
            }
        }
    }
    for (int k = 0; k < 3; ++k)
        if (pools[static_cast<size_t>(k)].empty())
            throw argument_error("train_world_model: empty task pool");
    if (held_out.empty()) held_out = pools[static_cast<size_t>(TaskKind::Cloning)];

    TrainReport report;
    report.held_out_before = detail::mean_loss_no_grad(model, held_out);
    AdamState adam;
    for (int step = 0; step < cfg.gradient_steps; ++step) {
        const std::vector<SeqExample>& pool = pools[static_cast<size_t>(rng.uniform_int(3))];
        std::vector<const SeqExample*> batch;
        for (int b = 0; b < cfg.batch_size; ++b)
            batch.push_back(&pool[static_cast<size_t>(rng.uniform_int(static_cast<int>(pool.size())))]);
        double lr = cfg.cosine ? cosine_lr(cfg.lr, step, cfg.gradient_steps) : cfg.lr;
        if (lr > 0.0) detail::train_step(model, batch, lr, cfg.adam ? &adam : nullptr);
        report.steps++;
    }
    report.held_out_after = detail::mean_loss_no_grad(model, held_out);
    return report;
}

inline WorldModelHandle train_world_model(const std::string& id, const DomainDataset& dataset,
                                          const ModelConfig& arch, const LmTrainConfig& cfg,
                                          uint64_t seed, int prototype_k) {
    WorldModelHandle handle;
    handle.id = id;
    handle.domain_id = dataset.domain_id;
    handle.model = std::make_shared<Transformer>(arch, seed);
    train_world_model_inplace(*handle.model, dataset, cfg, seed, &handle.provenance);
    handle.model->freeze();
    EmbeddingSet set = embed_dataset(
        [&] {
            std::vector<Trajectory> all;
            for (const auto& [scene, trajs] : dataset.per_scene)
                all.insert(all.end(), trajs.begin(), trajs.end());
            return all;
        }(),
        dataset.domain_id);
    handle.prototypes =
        k_center(set, std::min<int>(prototype_k, static_cast<int>(set.vectors.size())));
    return handle;
}

}  // namespace worldfuse
