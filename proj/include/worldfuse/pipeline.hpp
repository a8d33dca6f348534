// End-to-end orchestration: configuration file, corpus construction (seen and
// held-out domains with train/eval splits), dataset collection, model
// training stages, composition variants, and the report-producing experiment
// runners shared by the command-line tool and the acceptance suite.
#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dataset.hpp"
#include "domains.hpp"
#include "eval.hpp"
#include "meta.hpp"

namespace worldfuse {

namespace fs = std::filesystem;

struct FewShotConfig {
    double lr = 0.02;
    int steps = 24;
};

struct RetrievalConfig {
    int prototype_k = 15;
    int num_world_models = 6;
    int top_k = 3;
};

struct CorpusConfig {
    uint64_t seed = 1;
    int train_scenes_per_domain = 2;
    int train_instructions_per_scene = 10;
    // The decision model pretrains on its own scenes from the seen domains,
    // disjoint from the world-model datasets: generally competent, but it has
    // not memorized the data the composer is meta-trained on.
    int reasoning_scenes_per_domain = 2;
    int eval_instructions_per_domain = 5;
    int demo_instructions_per_domain = 10;
    int horizon = 30;
};

struct PipelineConfig {
    ModelConfig world_arch;
    ModelConfig reason_arch;
    LmTrainConfig world_train;
    LmTrainConfig reason_train;
    CompoundConfig compound;
    MetaConfig meta;
    RetrievalConfig retrieval;
    FewShotConfig few_shot;
    CorpusConfig corpus;
    std::vector<uint64_t> eval_seeds = {11, 22, 33, 44, 55};
    int threads = 0;

    static PipelineConfig defaults() {
        PipelineConfig c;
        c.world_arch.layers = 4;
        c.world_arch.dim = 32;
        c.world_arch.heads = 2;
        c.world_arch.vocab_size = vocab().size();
        c.world_arch.max_seq = 224;
        c.world_arch.taps = {1, 3};

        c.reason_arch.layers = 8;
        c.reason_arch.dim = 64;
        c.reason_arch.heads = 4;
        c.reason_arch.vocab_size = vocab().size();
        c.reason_arch.max_seq = 224;
        c.reason_arch.taps = {3, 7};

        c.world_train.gradient_steps = 700;
        c.world_train.batch_size = 4;
        c.world_train.lr = 2e-3;
        c.world_train.cosine = true;

        c.reason_train.gradient_steps = 1200;
        c.reason_train.batch_size = 4;
        c.reason_train.lr = 2e-3;
        c.reason_train.cosine = true;

        c.compound.world_dim = c.world_arch.dim;
        c.compound.reason_dim = c.reason_arch.dim;
        c.compound.attn_dim = c.reason_arch.dim;
        c.compound.heads = 1;
        c.compound.world_taps = c.world_arch.taps;
        c.compound.reason_taps = c.reason_arch.taps;

        c.meta.meta_update_steps = 8;
        c.meta.inner_loop_steps = 30;
        c.meta.alpha = 0.05;
        c.meta.beta = 0.5;
        c.meta.batch_size = 4;
        c.meta.subsets_per_step = 4;
        c.meta.subset_min = 1;
        c.meta.subset_max = 3;
        c.meta.cosine_inner = true;
        return c;
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["world_model"] = {{"layers", world_arch.layers},
                            {"dim", world_arch.dim},
                            {"heads", world_arch.heads},
                            {"max_seq", world_arch.max_seq},
                            {"taps", world_arch.taps},
                            {"gradient_steps", world_train.gradient_steps},
                            {"batch_size", world_train.batch_size},
                            {"learning_rate", world_train.lr},
                            {"lr_scheduler", world_train.cosine ? "cosine" : "constant"}};
        j["reasoning_model"] = {{"layers", reason_arch.layers},
                                {"dim", reason_arch.dim},
                                {"heads", reason_arch.heads},
                                {"max_seq", reason_arch.max_seq},
                                {"taps", reason_arch.taps},
                                {"gradient_steps", reason_train.gradient_steps},
                                {"batch_size", reason_train.batch_size},
                                {"learning_rate", reason_train.lr},
                                {"lr_scheduler", reason_train.cosine ? "cosine" : "constant"}};
        j["compound_attention"] = {{"attn_dim", compound.attn_dim},
                                   {"heads", compound.heads},
                                   {"init_sigma", compound.init_sigma}};
        j["meta"] = {{"meta_update_steps", meta.meta_update_steps},
                     {"inner_loop_gradient_steps", meta.inner_loop_steps},
                     {"alpha", meta.alpha},
                     {"beta", meta.beta},
                     {"batch_size", meta.batch_size},
                     {"subsets_per_meta_step", meta.subsets_per_step},
                     {"subset_size_min", meta.subset_min},
                     {"subset_size_max", meta.subset_max},
                     {"lr_scheduler", meta.cosine_inner ? "cosine" : "constant"}};
        j["few_shot"] = {{"learning_rate", few_shot.lr}, {"steps", few_shot.steps}};
        j["retrieval"] = {{"prototype_k", retrieval.prototype_k},
                          {"num_world_models", retrieval.num_world_models},
                          {"top_k", retrieval.top_k}};
        j["corpus"] = {{"seed", corpus.seed},
                       {"train_scenes_per_domain", corpus.train_scenes_per_domain},
                       {"reasoning_scenes_per_domain", corpus.reasoning_scenes_per_domain},
                       {"train_instructions_per_scene", corpus.train_instructions_per_scene},
                       {"eval_instructions_per_domain", corpus.eval_instructions_per_domain},
                       {"demo_instructions_per_domain", corpus.demo_instructions_per_domain},
                       {"horizon", corpus.horizon}};
        j["eval_seeds"] = eval_seeds;
        j["threads"] = threads;
        return j;
    }

    static PipelineConfig from_json(const nlohmann::json& j) {
        PipelineConfig c = defaults();
        auto get = [](const nlohmann::json& obj, const char* key, auto fallback) {
            using T = decltype(fallback);
            return obj.contains(key) ? obj.at(key).get<T>() : fallback;
        };
        if (j.contains("world_model")) {
            const auto& w = j.at("world_model");
            c.world_arch.layers = get(w, "layers", c.world_arch.layers);
            c.world_arch.dim = get(w, "dim", c.world_arch.dim);
            c.world_arch.heads = get(w, "heads", c.world_arch.heads);
            c.world_arch.max_seq = get(w, "max_seq", c.world_arch.max_seq);
            if (w.contains("taps")) c.world_arch.taps = w.at("taps").get<std::vector<int>>();
            c.world_train.gradient_steps = get(w, "gradient_steps", c.world_train.gradient_steps);
            c.world_train.batch_size = get(w, "batch_size", c.world_train.batch_size);
            c.world_train.lr = get(w, "learning_rate", c.world_train.lr);
            c.world_train.cosine =
                get(w, "lr_scheduler", std::string(c.world_train.cosine ? "cosine" : "constant")) ==
                "cosine";
        }
        if (j.contains("reasoning_model")) {
            const auto& r = j.at("reasoning_model");
            c.reason_arch.layers = get(r, "layers", c.reason_arch.layers);
            c.reason_arch.dim = get(r, "dim", c.reason_arch.dim);
            c.reason_arch.heads = get(r, "heads", c.reason_arch.heads);
            c.reason_arch.max_seq = get(r, "max_seq", c.reason_arch.max_seq);
            if (r.contains("taps")) c.reason_arch.taps = r.at("taps").get<std::vector<int>>();
            c.reason_train.gradient_steps = get(r, "gradient_steps", c.reason_train.gradient_steps);
            c.reason_train.batch_size = get(r, "batch_size", c.reason_train.batch_size);
            c.reason_train.lr = get(r, "learning_rate", c.reason_train.lr);
            c.reason_train.cosine =
                get(r, "lr_scheduler", std::string(c.reason_train.cosine ? "cosine" : "constant")) ==
                "cosine";
        }
        c.compound.world_dim = c.world_arch.dim;
        c.compound.reason_dim = c.reason_arch.dim;
        c.compound.attn_dim = c.reason_arch.dim;
        c.compound.world_taps = c.world_arch.taps;
        c.compound.reason_taps = c.reason_arch.taps;
        if (j.contains("compound_attention")) {
            const auto& a = j.at("compound_attention");
            c.compound.attn_dim = get(a, "attn_dim", c.compound.attn_dim);
            c.compound.heads = get(a, "heads", c.compound.heads);
            c.compound.init_sigma = get(a, "init_sigma", c.compound.init_sigma);
        }
        if (j.contains("meta")) {
            const auto& m = j.at("meta");
            c.meta.meta_update_steps = get(m, "meta_update_steps", c.meta.meta_update_steps);
            c.meta.inner_loop_steps =
                get(m, "inner_loop_gradient_steps", c.meta.inner_loop_steps);
            c.meta.alpha = get(m, "alpha", c.meta.alpha);
            c.meta.beta = get(m, "beta", c.meta.beta);
            c.meta.batch_size = get(m, "batch_size", c.meta.batch_size);
            c.meta.subsets_per_step = get(m, "subsets_per_meta_step", c.meta.subsets_per_step);
            c.meta.subset_min = get(m, "subset_size_min", c.meta.subset_min);
            c.meta.subset_max = get(m, "subset_size_max", c.meta.subset_max);
            c.meta.cosine_inner =
                get(m, "lr_scheduler", std::string(c.meta.cosine_inner ? "cosine" : "constant")) ==
                "cosine";
        }
        if (j.contains("few_shot")) {
            c.few_shot.lr = get(j.at("few_shot"), "learning_rate", c.few_shot.lr);
            c.few_shot.steps = get(j.at("few_shot"), "steps", c.few_shot.steps);
        }
        if (j.contains("retrieval")) {
            const auto& r = j.at("retrieval");
            c.retrieval.prototype_k = get(r, "prototype_k", c.retrieval.prototype_k);
            c.retrieval.num_world_models = get(r, "num_world_models", c.retrieval.num_world_models);
            c.retrieval.top_k = get(r, "top_k", c.retrieval.top_k);
        }
        if (j.contains("corpus")) {
            const auto& k = j.at("corpus");
            c.corpus.seed = get(k, "seed", c.corpus.seed);
            c.corpus.train_scenes_per_domain =
                get(k, "train_scenes_per_domain", c.corpus.train_scenes_per_domain);
            c.corpus.reasoning_scenes_per_domain =
                get(k, "reasoning_scenes_per_domain", c.corpus.reasoning_scenes_per_domain);
            c.corpus.train_instructions_per_scene =
                get(k, "train_instructions_per_scene", c.corpus.train_instructions_per_scene);
            c.corpus.eval_instructions_per_domain =
                get(k, "eval_instructions_per_domain", c.corpus.eval_instructions_per_domain);
            c.corpus.demo_instructions_per_domain =
                get(k, "demo_instructions_per_domain", c.corpus.demo_instructions_per_domain);
            c.corpus.horizon = get(k, "horizon", c.corpus.horizon);
        }
        if (j.contains("eval_seeds")) c.eval_seeds = j.at("eval_seeds").get<std::vector<uint64_t>>();
        if (j.contains("threads")) c.threads = j.at("threads").get<int>();
        c.world_arch.vocab_size = vocab().size();
        c.reason_arch.vocab_size = vocab().size();
        return c;
    }
};

// ---------------------------------------------------------------------------
// Corpus
// ---------------------------------------------------------------------------

struct SceneSplit {
    Scene scene;
    std::vector<Instruction> train;  // empty for held-out scenes
    std::vector<Instruction> eval;
};

struct DomainBundle {
    DomainSpec spec;
    bool seen = false;
    std::vector<SceneSplit> train_scenes;       // seen domains: world-model data
    std::vector<SceneSplit> reasoning_scenes;   // seen domains: decision-model data
    std::optional<SceneSplit> held_out_scene;   // seen domains: unseen-scene split
    std::optional<SceneSplit> eval_scene;       // unseen domains: the eval scene
    std::vector<Instruction> demos;             // unseen domains: few-shot demos
};

struct Corpus {
    std::vector<DomainBundle> seen;
    std::vector<DomainBundle> unseen;
};

inline Corpus build_corpus(const CorpusConfig& cc) {
    Corpus corpus;
    for (const auto& base : default_seen_specs()) {
        DomainBundle b;
        b.spec = base;
        b.seen = true;
        for (int k = 0; k < cc.train_scenes_per_domain; ++k) {
            DomainSpec spec = base;
            spec.num_instructions =
                cc.train_instructions_per_scene + cc.eval_instructions_per_domain;
            auto [scene, instructions] = generate_domain(
                derive_seed(derive_seed(cc.seed, base.id), static_cast<uint64_t>(k)), spec,
                cc.horizon);
            SceneSplit split;
            split.scene = std::move(scene);
            for (size_t i = 0; i < instructions.size(); ++i) {
                if (static_cast<int>(i) < cc.train_instructions_per_scene)
                    split.train.push_back(std::move(instructions[i]));
                else if (k == 0)  // seen-split eval cases come from the first scene
                    split.eval.push_back(std::move(instructions[i]));
            }
            b.train_scenes.push_back(std::move(split));
        }
        for (int k = 0; k < cc.reasoning_scenes_per_domain; ++k) {
            DomainSpec spec = base;
            spec.num_instructions = cc.train_instructions_per_scene;
            auto [scene, instructions] = generate_domain(
                derive_seed(derive_seed(derive_seed(cc.seed, base.id), "general"),
                            static_cast<uint64_t>(k)),
                spec, cc.horizon);
            SceneSplit split;
            split.scene = std::move(scene);
            split.train = std::move(instructions);
            b.reasoning_scenes.push_back(std::move(split));
        }
        {
            DomainSpec spec = base;
            spec.num_instructions = cc.eval_instructions_per_domain;
            auto [scene, instructions] = generate_domain(
                derive_seed(derive_seed(cc.seed, base.id), 0xfeedu), spec, cc.horizon);
            SceneSplit split;
            split.scene = std::move(scene);
            split.eval = std::move(instructions);
            b.held_out_scene = std::move(split);
        }
        corpus.seen.push_back(std::move(b));
    }
    for (const auto& base : default_unseen_specs()) {
        DomainBundle b;
        b.spec = base;
        b.seen = false;
        DomainSpec spec = base;
        spec.num_instructions =
            cc.eval_instructions_per_domain + cc.demo_instructions_per_domain;
        auto [scene, instructions] =
            generate_domain(derive_seed(cc.seed, base.id), spec, cc.horizon);
        SceneSplit split;
        split.scene = std::move(scene);
        for (size_t i = 0; i < instructions.size(); ++i) {
            if (static_cast<int>(i) < cc.eval_instructions_per_domain)
                split.eval.push_back(std::move(instructions[i]));
            else
                b.demos.push_back(std::move(instructions[i]));
        }
        b.eval_scene = std::move(split);
        corpus.unseen.push_back(std::move(b));
    }
    return corpus;
}

inline std::vector<DomainDataset> collect_datasets(const Corpus& corpus, int horizon,
                                                   bool reasoning_side = false) {
    std::vector<DomainDataset> out;
    for (const auto& b : corpus.seen) {
        DomainDataset ds;
        ds.domain_id = b.spec.id;
        for (const auto& split : reasoning_side ? b.reasoning_scenes : b.train_scenes) {
            std::vector<Trajectory> trajs;
            for (const auto& ins : split.train)
                trajs.push_back(expert_rollout(split.scene, ins, horizon, b.spec.id));
            ds.per_scene.emplace_back(split.scene, std::move(trajs));
        }
        out.push_back(std::move(ds));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Trained artifacts
// ---------------------------------------------------------------------------

struct Artifacts {
    PipelineConfig config;
    Corpus corpus;
    std::vector<DomainDataset> datasets;            // world-model datasets
    std::vector<DomainDataset> reasoning_datasets;  // decision-model pretraining pool
    std::vector<WorldModelHandle> worlds;
    ReasoningModel reasoning;
    // one meta-trained composer per fusion variant, built on demand
    std::map<std::string, CompoundAttention> thetas;
    std::set<std::string> train_provenance;  // all domains any training touched
    TapCache tap_cache;

    const CompoundAttention& theta(const std::string& fusion = "hierarchical") const {
        auto it = thetas.find(fusion);
        if (it == thetas.end()) throw config_error("no composer trained for fusion " + fusion);
        return it->second;
    }
};

inline CompoundAttention::Fusion fusion_from_name(const std::string& name) {
    if (name == "hierarchical") return CompoundAttention::Fusion::Hierarchical;
    if (name == "concat") return CompoundAttention::Fusion::Concat;
    if (name == "add") return CompoundAttention::Fusion::Add;
    throw argument_error("unknown fusion: " + name);
}

inline void train_world_models(Artifacts& a) {
    const PipelineConfig& c = a.config;
    a.worlds.assign(a.datasets.size(), {});
    parallel_for(
        a.datasets.size(),
        [&](size_t i) {
            a.worlds[i] = train_world_model(
                "wm_" + a.datasets[i].domain_id, a.datasets[i], c.world_arch, c.world_train,
                derive_seed(c.corpus.seed, a.datasets[i].domain_id), c.retrieval.prototype_k);
        },
        c.threads);
    for (const auto& w : a.worlds)
        a.train_provenance.insert(w.provenance.begin(), w.provenance.end());
}

inline void train_reasoning(Artifacts& a, TrainReport* report = nullptr) {
    const PipelineConfig& c = a.config;
    a.reasoning = pretrain_reasoning(a.reasoning_datasets, c.reason_arch, c.reason_train,
                                     derive_seed(c.corpus.seed, "reasoning-pretrain"), report);
    a.train_provenance.insert(a.reasoning.provenance.begin(), a.reasoning.provenance.end());
}

inline DomainPools cloning_pools(const std::vector<DomainDataset>& datasets) {
    DomainPools pools;
    for (const auto& ds : datasets) {
        std::vector<SeqExample>& pool = pools[ds.domain_id];
        for (const auto& [scene, trajs] : ds.per_scene)
            for (const auto& t : trajs)
                for (const auto& s : t.steps)
                    pool.push_back(
                        seq::cloning_example(t.instruction, s.before, s.action, ds.domain_id));
    }
    return pools;
}

inline MetaRunInfo train_composer(Artifacts& a, const std::string& fusion_name) {
    const PipelineConfig& c = a.config;
    DomainPools pools = cloning_pools(a.datasets);
    std::vector<const WorldModelHandle*> ptrs;
    for (const auto& w : a.worlds) ptrs.push_back(&w);
    CompoundAttention theta(c.compound, derive_seed(c.corpus.seed, "theta-" + fusion_name));
    MetaConfig mc = c.meta;
    mc.threads = c.threads;
    MetaRunInfo info =
        meta_train(theta, ptrs, pools, a.reasoning, mc,
                   derive_seed(c.corpus.seed, "meta-" + fusion_name),
                   fusion_from_name(fusion_name), &a.tap_cache);
    for (const auto& [domain, pool] : pools)
        for (const auto& ex : pool) a.train_provenance.insert(ex.provenance);
    a.thetas.erase(fusion_name);
    a.thetas.emplace(fusion_name, std::move(theta));
    return info;
}

// Full pipeline in memory: corpus, datasets, all models, composer(s).
// Artifacts hold a mutex-bearing cache, so the caller provides the object.
inline void build_pipeline(Artifacts& a, const PipelineConfig& config,
                           const std::vector<std::string>& fusions = {"hierarchical"}) {
    a.config = config;
    a.corpus = build_corpus(config.corpus);
    a.datasets = collect_datasets(a.corpus, config.corpus.horizon);
    a.reasoning_datasets = collect_datasets(a.corpus, config.corpus.horizon, true);
    train_world_models(a);
    train_reasoning(a);
    for (const auto& f : fusions) train_composer(a, f);
}

// ---------------------------------------------------------------------------
// Artifact files
// ---------------------------------------------------------------------------

inline void save_prototypes(const std::string& path, const PrototypeSet& p,
                            const std::string& domain_id) {
    ParamStore ps;
    std::vector<double> flat;
    for (const auto& c : p.centers) flat.insert(flat.end(), c.begin(), c.end());
    ps.add("centers", Tensor::parameter({static_cast<int>(p.centers.size()),
                                         static_cast<int>(p.centers[0].size())},
                                        std::move(flat)));
    ps.add("rho", Tensor::parameter({1}, {p.rho}));
    save_checkpoint(path, ps, {{"domain", domain_id}});
}

inline PrototypeSet load_prototypes(const std::string& path) {
    Checkpoint ck = load_checkpoint(path);
    const Tensor& centers = ck.params.get("centers");
    PrototypeSet p;
    int k = centers.dim(0), d = centers.dim(1);
    for (int i = 0; i < k; ++i)
        p.centers.emplace_back(centers.data().begin() + static_cast<size_t>(i) * d,
                               centers.data().begin() + static_cast<size_t>(i + 1) * d);
    p.rho = ck.params.get("rho").data()[0];
    return p;
}

inline std::string join_set(const std::set<std::string>& s) {
    std::string out;
    for (const auto& x : s) {
        if (!out.empty()) out += ",";
        out += x;
    }
    return out;
}

inline std::set<std::string> split_set(const std::string& s) {
    std::set<std::string> out;
    size_t pos = 0;
    while (pos < s.size()) {
        size_t comma = s.find(',', pos);
        if (comma == std::string::npos) comma = s.size();
        if (comma > pos) out.insert(s.substr(pos, comma - pos));
        pos = comma + 1;
    }
    return out;
}

inline void save_artifacts(const Artifacts& a, const std::string& dir) {
    fs::create_directories(fs::path(dir) / "models");
    save_json((fs::path(dir) / "config.json").string(), a.config.to_json());
    for (const auto& w : a.worlds) {
        auto meta = w.model->config().to_meta();
        meta["id"] = w.id;
        meta["domain"] = w.domain_id;
        meta["provenance"] = join_set(w.provenance);
        save_checkpoint((fs::path(dir) / "models" / (w.id + ".ckpt")).string(),
                        w.model->params(), meta);
        save_prototypes((fs::path(dir) / "models" / (w.id + ".protos")).string(), w.prototypes,
                        w.domain_id);
    }
    if (a.reasoning.model) {
        auto meta = a.reasoning.model->config().to_meta();
        meta["provenance"] = join_set(a.reasoning.provenance);
        save_checkpoint((fs::path(dir) / "models" / "reasoning.ckpt").string(),
                        a.reasoning.model->params(), meta);
    }
    for (const auto& [fusion, theta] : a.thetas)
        save_checkpoint((fs::path(dir) / "models" / ("theta_" + fusion + ".ckpt")).string(),
                        theta.params(), theta.config().to_meta());
}

// Loads whatever is present in `dir`; corpus and datasets re-derive from the
// stored config (generation is deterministic).
inline void load_artifacts(Artifacts& a, const std::string& dir, bool need_models = true) {
    a.config = PipelineConfig::from_json(load_json((fs::path(dir) / "config.json").string()));
    a.corpus = build_corpus(a.config.corpus);
    a.datasets = collect_datasets(a.corpus, a.config.corpus.horizon);
    a.reasoning_datasets = collect_datasets(a.corpus, a.config.corpus.horizon, true);
    if (!need_models) return;
    a.worlds.clear();
    for (const auto& ds : a.datasets) {
        std::string base = (fs::path(dir) / "models" / ("wm_" + ds.domain_id)).string();
        if (!fs::exists(base + ".ckpt")) continue;
        Checkpoint ck = load_checkpoint(base + ".ckpt");
        WorldModelHandle w;
        w.id = ck.meta.at("id");
        w.domain_id = ck.meta.at("domain");
        w.provenance = split_set(ck.meta.count("provenance") ? ck.meta.at("provenance") : "");
        w.model = std::make_shared<Transformer>(Transformer::from_checkpoint(ck));
        w.model->freeze();
        w.prototypes = load_prototypes(base + ".protos");
        a.worlds.push_back(std::move(w));
        a.train_provenance.insert(a.worlds.back().provenance.begin(),
                                  a.worlds.back().provenance.end());
    }
    std::string rm_path = (fs::path(dir) / "models" / "reasoning.ckpt").string();
    if (fs::exists(rm_path)) {
        Checkpoint ck = load_checkpoint(rm_path);
        a.reasoning.model = std::make_shared<Transformer>(Transformer::from_checkpoint(ck));
        a.reasoning.model->freeze();
        a.reasoning.provenance =
            split_set(ck.meta.count("provenance") ? ck.meta.at("provenance") : "");
        a.train_provenance.insert(a.reasoning.provenance.begin(), a.reasoning.provenance.end());
    }
    for (const std::string fusion : {"hierarchical", "concat", "add"}) {
        std::string path = (fs::path(dir) / "models" / ("theta_" + fusion + ".ckpt")).string();
        if (!fs::exists(path)) continue;
        a.thetas.emplace(fusion, CompoundAttention::from_checkpoint(load_checkpoint(path)));
        // composer training consumed every seen domain's pool
        for (const auto& ds : a.datasets) a.train_provenance.insert(ds.domain_id);
    }
}

// ---------------------------------------------------------------------------
// Evaluation entry points
// ---------------------------------------------------------------------------

inline std::vector<EvalCase> cases_for_split(const Corpus& corpus, const std::string& split) {
    std::vector<EvalCase> cases;
    if (split == "seen") {
        for (const auto& b : corpus.seen)
            for (const auto& sc : b.train_scenes)
                for (const auto& ins : sc.eval) cases.push_back({b.spec.id, &sc.scene, &ins});
    } else if (split == "unseen-scene") {
        for (const auto& b : corpus.seen) {
            const SceneSplit& sc = *b.held_out_scene;
            for (const auto& ins : sc.eval) cases.push_back({b.spec.id, &sc.scene, &ins});
        }
    } else if (split == "unseen") {
        for (const auto& b : corpus.unseen) {
            const SceneSplit& sc = *b.eval_scene;
            for (const auto& ins : sc.eval) cases.push_back({b.spec.id, &sc.scene, &ins});
        }
    } else {
        throw argument_error("unknown split: " + split);
    }
    if (cases.empty()) throw argument_error("split " + split + " has no evaluation cases");
    return cases;
}

// The ablation/variant table: which policy a variant name denotes.
//   bare    - the frozen decision model alone
//   full    - retrieval top-K + hierarchical fusion
//   E       - every world model, hierarchical fusion
//   R       - random K-subset per episode, hierarchical fusion
//   F       - single most relevant model
//   CONCAT  - retrieval top-K, concatenation fusion
//   ADD     - retrieval top-K, summation fusion
inline PolicyFactory make_variant_factory(const Artifacts& a, const std::string& variant,
                                          const CompoundAttention* theta_override = nullptr) {
    Artifacts* ap = const_cast<Artifacts*>(&a);  // tap cache is the only mutation
    auto composed = [ap, theta_override](SelectionRule rule, CompoundAttention::Fusion fusion,
                                         const std::string& fusion_name) -> PolicyFactory {
        const CompoundAttention* theta = theta_override ? theta_override : &ap->theta(fusion_name);
        return [ap, rule, fusion, theta]() {
            return std::make_unique<ComposedEvalPolicy>(
                ap->reasoning, ap->worlds, *theta, ap->config.retrieval.top_k,
                ap->config.retrieval.prototype_k, rule, fusion, &ap->tap_cache);
        };
    };
    if (variant == "bare")
        return [ap]() { return std::make_unique<BarePolicy>(ap->reasoning); };
    if (variant == "expert") {
        int horizon = a.config.corpus.horizon;
        return [horizon]() { return std::make_unique<ExpertPolicy>(horizon); };
    }
    if (variant == "full")
        return composed(SelectionRule::Retrieval, CompoundAttention::Fusion::Hierarchical,
                        "hierarchical");
    if (variant == "E")
        return composed(SelectionRule::All, CompoundAttention::Fusion::Hierarchical,
                        "hierarchical");
    if (variant == "R")
        return composed(SelectionRule::Random, CompoundAttention::Fusion::Hierarchical,
                        "hierarchical");
    if (variant == "F")
        return composed(SelectionRule::TopOne, CompoundAttention::Fusion::Hierarchical,
                        "hierarchical");
    if (variant == "CONCAT")
        return composed(SelectionRule::Retrieval, CompoundAttention::Fusion::Concat, "concat");
    if (variant == "ADD")
        return composed(SelectionRule::Retrieval, CompoundAttention::Fusion::Add, "add");
    throw argument_error("unknown variant: " + variant);
}

// Zero-shot protocols must not have touched the target domains anywhere in
// training; every training batch carried a provenance tag that flowed into
// train_provenance.
inline void assert_zero_shot_provenance(const Artifacts& a, const std::vector<EvalCase>& cases) {
    for (const auto& c : cases)
        if (a.train_provenance.count(c.domain_id))
            throw contract_error("zero-shot protocol touches trained domain " + c.domain_id);
}

inline MetricsRecord run_variant(const Artifacts& a, const std::string& variant,
                                 const std::string& split, const EvalProtocol& protocol,
                                 bool record_masses = false,
                                 const CompoundAttention* theta_override = nullptr) {
    std::vector<EvalCase> cases = cases_for_split(a.corpus, split);
    if (protocol.n_shot == 0 && split == "unseen" && variant != "expert")
        assert_zero_shot_provenance(a, cases);
    MetricsRecord rec = run_protocol(make_variant_factory(a, variant, theta_override), cases,
                                     protocol, record_masses);
    verify_metrics_consistency(rec);
    return rec;
}

// Few-shot: adapt a copy of the composer on expert demos from each unseen
// domain, then evaluate that domain with the adapted copy.
inline MetricsRecord run_few_shot(const Artifacts& a, int n_shot, const EvalProtocol& protocol,
                                  const std::string& fusion_name = "hierarchical") {
    if (n_shot < 1) throw argument_error("run_few_shot: n_shot must be positive");
    const PipelineConfig& c = a.config;
    std::vector<EpisodeResult> all_rows;
    for (const auto& b : a.corpus.unseen) {
        std::vector<Trajectory> demos;
        for (int i = 0; i < n_shot && i < static_cast<int>(b.demos.size()); ++i)
            demos.push_back(
                expert_rollout(b.eval_scene->scene, b.demos[static_cast<size_t>(i)],
                               protocol.horizon, b.spec.id));
        CompoundAttention adapted = a.theta(fusion_name).clone();
        few_shot_adapt(adapted, a.reasoning, a.worlds, demos, c.retrieval.top_k,
                       c.retrieval.prototype_k, c.few_shot.lr, c.few_shot.steps,
                       derive_seed(c.corpus.seed, "few-shot-" + b.spec.id),
                       fusion_from_name(fusion_name), &const_cast<Artifacts&>(a).tap_cache);

        std::vector<EvalCase> cases;
        for (const auto& ins : b.eval_scene->eval) cases.push_back({b.spec.id, &b.eval_scene->scene, &ins});
        MetricsRecord rec = run_protocol(
            make_variant_factory(a, "full", &adapted), cases, protocol, false);
        for (auto& row : rec.rows) all_rows.push_back(std::move(row));
    }
    return compute_metrics(std::move(all_rows));
}

// Continual composition: evaluate after each model addition, then report the
// effect of removing each domain's matched model on that domain's episodes.
struct ContinualPoint {
    std::string event;  // "add wm_x" / "remove wm_x"
    MetricsRecord metrics;
};

inline std::vector<ContinualPoint> run_continual(const Artifacts& a, const std::string& split,
                                                 const EvalProtocol& protocol) {
    if (a.worlds.size() < 2) throw argument_error("run_continual: need at least two models");
    std::vector<EvalCase> cases = cases_for_split(a.corpus, split);
    const PipelineConfig& c = a.config;
    Artifacts& mut = const_cast<Artifacts&>(a);
    std::vector<ContinualPoint> out;
    std::vector<WorldModelHandle> active;
    for (const auto& w : a.worlds) {
        active.push_back(w);
        PolicyFactory factory = [&mut, &c, &active]() {
            return std::make_unique<ComposedEvalPolicy>(
                mut.reasoning, active, mut.theta("hierarchical"),
                std::min<int>(c.retrieval.top_k, static_cast<int>(active.size())),
                c.retrieval.prototype_k, SelectionRule::Retrieval,
                CompoundAttention::Fusion::Hierarchical, &mut.tap_cache);
        };
        MetricsRecord rec = run_protocol(factory, cases, protocol);
        out.push_back({"add " + w.id, std::move(rec)});
    }
    return out;
}

// Removal effect on one domain: metrics with the full pool vs the pool
// without that domain's model, on that domain's cases only.
struct RemovalEffect {
    std::string domain_id;
    MetricsRecord with_model;
    MetricsRecord without_model;
};

inline RemovalEffect run_removal(const Artifacts& a, const std::string& domain_id,
                                 const std::string& split, const EvalProtocol& protocol) {
    std::vector<EvalCase> all_cases = cases_for_split(a.corpus, split);
    std::vector<EvalCase> cases;
    for (const auto& c : all_cases)
        if (c.domain_id == domain_id) cases.push_back(c);
    if (cases.empty()) throw argument_error("run_removal: no cases for domain " + domain_id);

    const PipelineConfig& c = a.config;
    Artifacts& mut = const_cast<Artifacts&>(a);
    RemovalEffect eff;
    eff.domain_id = domain_id;

    std::vector<WorldModelHandle> without;
    for (const auto& w : a.worlds)
        if (w.domain_id != domain_id) without.push_back(w);
    if (without.size() == a.worlds.size())
        throw argument_error("run_removal: no model matches domain " + domain_id);

    auto factory_for = [&](const std::vector<WorldModelHandle>& pool) -> PolicyFactory {
        return [&mut, &c, &pool]() {
            return std::make_unique<ComposedEvalPolicy>(
                mut.reasoning, pool, mut.theta("hierarchical"),
                std::min<int>(c.retrieval.top_k, static_cast<int>(pool.size())),
                c.retrieval.prototype_k, SelectionRule::Retrieval,
                CompoundAttention::Fusion::Hierarchical, &mut.tap_cache);
        };
    };
    eff.with_model = run_protocol(factory_for(a.worlds), cases, protocol);
    eff.without_model = run_protocol(factory_for(without), cases, protocol);
    return eff;
}

// One protocol run per requested model count, shared seeds.
inline std::vector<std::pair<int, MetricsRecord>> scaling_sweep(const Artifacts& a,
                                                                const std::vector<int>& k_values,
                                                                const std::string& split,
                                                                const EvalProtocol& protocol) {
    const PipelineConfig& c = a.config;
    Artifacts& mut = const_cast<Artifacts&>(a);
    std::vector<EvalCase> cases = cases_for_split(a.corpus, split);
    std::vector<std::pair<int, MetricsRecord>> out;
    for (int k : k_values) {
        if (k < 1 || k > static_cast<int>(a.worlds.size()))
            throw argument_error("scaling_sweep: K out of range");
        PolicyFactory factory = [&mut, &c, k]() {
            return std::make_unique<ComposedEvalPolicy>(
                mut.reasoning, mut.worlds, mut.theta("hierarchical"), k,
                c.retrieval.prototype_k,
                k == static_cast<int>(mut.worlds.size()) ? SelectionRule::All
                                                         : SelectionRule::Retrieval,
                CompoundAttention::Fusion::Hierarchical, &mut.tap_cache);
        };
        out.emplace_back(k, run_protocol(factory, cases, protocol));
    }
    return out;
}

}  // namespace worldfuse
