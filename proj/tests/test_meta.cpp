#include <doctest.h>

#include "test_support.hpp"
#include "worldfuse/domains.hpp"
#include "worldfuse/meta.hpp"

using namespace worldfuse;

namespace {

ModelConfig meta_model_cfg(int dim) {
    ModelConfig c;
    c.layers = 2;
    c.dim = dim;
    c.heads = 2;
    c.vocab_size = vocab().size();
    c.max_seq = 256;
    c.taps = {1, 2};
    return c;
}

CompoundConfig meta_cc() {
    CompoundConfig c;
    c.world_dim = 8;
    c.reason_dim = 8;
    c.attn_dim = 8;
    c.heads = 1;
    c.world_taps = {1, 2};
    c.reason_taps = {1, 2};
    return c;
}

struct MetaFixture {
    ReasoningModel rm;
    std::vector<WorldModelHandle> worlds;
    DomainPools pools;
    std::vector<const WorldModelHandle*> model_ptrs;

    MetaFixture(int n_domains = 3, int instr = 4) {
        rm.model = std::make_shared<Transformer>(meta_model_cfg(8), 901);
        rm.model->freeze();
        auto specs = default_seen_specs();
        for (int d = 0; d < n_domains; ++d) {
            DomainSpec spec = specs[static_cast<size_t>(d)];
            spec.num_instructions = instr;
            auto [scene, instructions] = generate_domain(derive_seed(700, static_cast<uint64_t>(d)), spec);
            std::vector<SeqExample> pool;
            for (const auto& ins : instructions) {
                Trajectory t = expert_rollout(scene, ins, 30, spec.id);
                for (const auto& s : t.steps)
                    pool.push_back(seq::cloning_example(t.instruction, s.before, s.action, spec.id));
            }
            pools[spec.id] = std::move(pool);

            WorldModelHandle w;
            w.id = "wm_" + spec.id;
            w.domain_id = spec.id;
            w.model = std::make_shared<Transformer>(meta_model_cfg(8),
                                                    derive_seed(800, static_cast<uint64_t>(d)));
            w.model->freeze();
            worlds.push_back(std::move(w));
        }
        for (const auto& w : worlds) model_ptrs.push_back(&w);
    }
};

}  // namespace

TEST_CASE("sample_subsets: degenerate range, determinism, frequencies") {
    MetaFixture fx(3);

    SUBCASE("full-range subsets are the whole pool") {
        auto tasks = sample_subsets(fx.model_ptrs, fx.pools, 5, 3, 3, 42);
        for (const auto& t : tasks) CHECK(t.models.size() == 3);
    }

    SUBCASE("same seed gives identical subsets") {
        auto a = sample_subsets(fx.model_ptrs, fx.pools, 6, 1, 3, 7);
        auto b = sample_subsets(fx.model_ptrs, fx.pools, 6, 1, 3, 7);
        REQUIRE(a.size() == b.size());
        for (size_t i = 0; i < a.size(); ++i) {
            REQUIRE(a[i].models.size() == b[i].models.size());
            for (size_t k = 0; k < a[i].models.size(); ++k)
                CHECK(a[i].models[k]->id == b[i].models[k]->id);
        }
    }

    SUBCASE("membership frequency matches the combinatorial expectation") {
        // sizes uniform over {1,2,3} of 3 models: expected inclusion = mean(1/3,2/3,1) = 2/3
        std::map<std::string, int> counts;
        const int draws = 10000;
        auto tasks = sample_subsets(fx.model_ptrs, fx.pools, draws, 1, 3, 99);
        for (const auto& t : tasks)
            for (const auto* w : t.models) counts[w->id]++;
        for (const auto& w : fx.worlds)
            CHECK(std::fabs(counts[w.id] / static_cast<double>(draws) - 2.0 / 3.0) < 0.03);
    }

    SUBCASE("errors") {
        CHECK_THROWS_AS(sample_subsets({}, fx.pools, 1, 1, 1, 0), argument_error);
        CHECK_THROWS_AS(sample_subsets(fx.model_ptrs, fx.pools, 1, 0, 2, 0), argument_error);
        CHECK_THROWS_AS(sample_subsets(fx.model_ptrs, fx.pools, 1, 1, 9, 0), argument_error);
    }
}

TEST_CASE("inner_loop identities") {
    MetaFixture fx(2);
    CompoundAttention theta(meta_cc(), 11);
    auto tasks = sample_subsets(fx.model_ptrs, fx.pools, 1, 2, 2, 5);

    SUBCASE("zero inner steps leave theta_j = theta") {
        CompoundAttention tj = theta.clone();
        inner_loop(tj, fx.rm, tasks[0], 0.1, 0, 2, 3, CompoundAttention::Fusion::Hierarchical,
                   nullptr, false);
        CHECK(tj.hash_hex() == theta.hash_hex());
    }

    SUBCASE("zero learning rate leaves theta_j = theta") {
        CompoundAttention tj = theta.clone();
        inner_loop(tj, fx.rm, tasks[0], 0.0, 3, 2, 3, CompoundAttention::Fusion::Hierarchical,
                   nullptr, false);
        CHECK(tj.hash_hex() == theta.hash_hex());
    }

    SUBCASE("descent on the training batch distribution") {
        // after adapting, loss on the same pool should usually drop
        int wins = 0;
        const int seeds = 5;
        for (uint64_t seed = 1; seed <= seeds; ++seed) {
            CompoundAttention tj = theta.clone();
            TapCache cache;
            ComposedPolicy before = ComposedPolicy::make(fx.rm, tasks[0].models, tj,
                                                         CompoundAttention::Fusion::Hierarchical,
                                                         &cache);
            std::vector<const SeqExample*> probe(tasks[0].pool.begin(),
                                                 tasks[0].pool.begin() +
                                                     std::min<size_t>(8, tasks[0].pool.size()));
            autodiff::NoGradGuard* ng = nullptr;
            double l0;
            {
                autodiff::NoGradGuard g;
                l0 = detail::composed_batch_loss(before, probe).value();
            }
            inner_loop(tj, fx.rm, tasks[0], 0.08, 12, 3, seed,
                       CompoundAttention::Fusion::Hierarchical, &cache, false);
            double l1;
            {
                autodiff::NoGradGuard g;
                l1 = detail::composed_batch_loss(before, probe).value();
            }
            wins += l1 < l0;
            (void)ng;
        }
        CHECK(wins >= 4);
    }
}

TEST_CASE("outer_update algebra") {
    MetaFixture fx(2);
    CompoundAttention theta(meta_cc(), 21);

    SUBCASE("fixed point: all adapted copies equal theta") {
        CompoundAttention a = theta.clone(), b = theta.clone();
        std::string before = theta.hash_hex();
        outer_update(theta, {&a, &b}, 0.5);
        CHECK(theta.hash_hex() == before);
    }

    SUBCASE("m=1, beta=1 jumps to the adapted copy") {
        CompoundAttention a = theta.clone();
        Rng rng(3);
        for (auto& [name, t] : a.params())
            for (auto& v : t.mutable_data()) v += rng.uniform(-0.1, 0.1);
        outer_update(theta, {&a}, 1.0);
        CHECK(theta.hash_hex() == a.hash_hex());
    }

    SUBCASE("linearity in the adapted copies") {
        CompoundAttention a = theta.clone(), b = theta.clone();
        CompoundAttention orig = theta.clone();
        for (auto& [name, t] : a.params())
            for (auto& v : t.mutable_data()) v += 0.2;
        for (auto& [name, t] : b.params())
            for (auto& v : t.mutable_data()) v -= 0.2;
        outer_update(theta, {&a, &b}, 0.7);  // mean displacement is ~zero
        for (auto& [name, t] : theta.params()) {
            auto od = orig.params().get(name).data();
            for (size_t i = 0; i < t.size(); ++i)
                CHECK(std::fabs(t.data()[i] - od[i]) < 1e-15);
        }
    }
}

TEST_CASE("reptile collapse: m=1, one inner step equals scaled gradient descent") {
    MetaFixture fx(2);
    CompoundAttention theta(meta_cc(), 31);
    Rng rng(17);
    for (auto& [name, t] : theta.params())
        if (name.find("align_v") != std::string::npos)
            for (auto& v : t.mutable_data()) v = rng.uniform(-0.1, 0.1);

    const double alpha = 0.05, beta = 0.25;
    auto tasks = sample_subsets(fx.model_ptrs, fx.pools, 1, 2, 2, 1234);

    // the batch the inner loop will draw with this seed
    const uint64_t inner_seed = 777;
    Rng batch_rng(derive_seed(inner_seed, "inner"));
    std::vector<const SeqExample*> batch;
    for (int b = 0; b < 3; ++b)
        batch.push_back(tasks[0].pool[static_cast<size_t>(
            batch_rng.uniform_int(static_cast<int>(tasks[0].pool.size())))]);

    // analytic target: theta' = theta - beta * alpha * grad L(theta, B)
    ComposedPolicy p = ComposedPolicy::make(fx.rm, tasks[0].models, theta,
                                            CompoundAttention::Fusion::Hierarchical);
    Tensor loss = detail::composed_batch_loss(p, batch);
    GradMap grads = backward(loss, theta.params());
    std::map<std::string, std::vector<double>> expected;
    for (auto& [name, t] : theta.params()) {
        std::vector<double> e(t.data().begin(), t.data().end());
        auto g = grads.at(name).data();
        for (size_t i = 0; i < e.size(); ++i) e[i] -= beta * alpha * g[i];
        expected[name] = std::move(e);
    }

    CompoundAttention tj = theta.clone();
    inner_loop(tj, fx.rm, tasks[0], alpha, 1, 3, inner_seed,
               CompoundAttention::Fusion::Hierarchical, nullptr, /*cosine=*/false);
    outer_update(theta, {&tj}, beta);

    for (auto& [name, t] : theta.params()) {
        const auto& e = expected.at(name);
        for (size_t i = 0; i < e.size(); ++i)
            CHECK(std::fabs(t.data()[i] - e[i]) < 1e-12);
    }
}

TEST_CASE("meta_train determinism and freezing") {
    MetaFixture fx(3);
    MetaConfig cfg;
    cfg.meta_update_steps = 2;
    cfg.inner_loop_steps = 3;
    cfg.alpha = 0.05;
    cfg.beta = 0.5;
    cfg.batch_size = 2;
    cfg.subsets_per_step = 2;
    cfg.subset_min = 1;
    cfg.subset_max = 2;
    cfg.threads = 2;

    std::string rm_hash_before = fx.rm.checkpoint_hash_hex();
    std::vector<std::string> wm_hashes;
    for (const auto& w : fx.worlds) wm_hashes.push_back(w.checkpoint_hash_hex());

    CompoundAttention t1(meta_cc(), 41);
    CompoundAttention t2(meta_cc(), 41);
    TapCache c1, c2;
    MetaRunInfo i1 = meta_train(t1, fx.model_ptrs, fx.pools, fx.rm, cfg, 9,
                                CompoundAttention::Fusion::Hierarchical, &c1);
    MetaRunInfo i2 = meta_train(t2, fx.model_ptrs, fx.pools, fx.rm, cfg, 9,
                                CompoundAttention::Fusion::Hierarchical, &c2);
    CHECK(i1.theta_hash == i2.theta_hash);
    CHECK(t1.hash_hex() == t2.hash_hex());

    // serial run matches the threaded run
    MetaConfig serial = cfg;
    serial.threads = 1;
    CompoundAttention t3(meta_cc(), 41);
    MetaRunInfo i3 = meta_train(t3, fx.model_ptrs, fx.pools, fx.rm, serial, 9,
                                CompoundAttention::Fusion::Hierarchical, nullptr);
    CHECK(i3.theta_hash == i1.theta_hash);

    // frozen components never moved
    CHECK(fx.rm.checkpoint_hash_hex() == rm_hash_before);
    for (size_t i = 0; i < fx.worlds.size(); ++i)
        CHECK(fx.worlds[i].checkpoint_hash_hex() == wm_hashes[i]);

    nlohmann::json manifest = meta_manifest(cfg, i1, fx.model_ptrs, fx.rm);
    CHECK(manifest.at("theta_hash").get<std::string>() == i1.theta_hash);
    CHECK(manifest.at("world_models").size() == 3);
}

TEST_CASE("few_shot_adapt moves theta only") {
    MetaFixture fx(3);
    // prototypes are required by retrieval inside few-shot adaptation
    for (auto& w : fx.worlds) {
        std::vector<Trajectory> ts;
        DomainSpec spec;
        for (const auto& s : default_seen_specs())
            if (s.id == w.domain_id) spec = s;
        spec.num_instructions = 3;
        auto [scene, instructions] = generate_domain(31, spec);
        for (const auto& ins : instructions) ts.push_back(expert_rollout(scene, ins, 30, spec.id));
        EmbeddingSet set = embed_dataset(ts, spec.id);
        w.prototypes = k_center(set, std::min<int>(15, static_cast<int>(set.vectors.size())));
    }
    DomainSpec target = default_unseen_specs()[0];
    target.num_instructions = 2;
    auto [scene, instructions] = generate_domain(77, target);
    std::vector<Trajectory> demos;
    for (const auto& ins : instructions) demos.push_back(expert_rollout(scene, ins, 30, target.id));

    CompoundAttention theta(meta_cc(), 51);
    std::string before = theta.hash_hex();
    std::string rm_before = fx.rm.checkpoint_hash_hex();
    std::vector<std::string> wm_before;
    for (const auto& w : fx.worlds) wm_before.push_back(w.checkpoint_hash_hex());

    SUBCASE("zero steps change nothing") {
        few_shot_adapt(theta, fx.rm, fx.worlds, demos, 2, 15, 0.05, 0, 3);
        CHECK(theta.hash_hex() == before);
    }

    SUBCASE("adaptation moves theta and leaves the models hash-identical") {
        few_shot_adapt(theta, fx.rm, fx.worlds, demos, 2, 15, 0.05, 5, 3);
        CHECK(theta.hash_hex() != before);
        CHECK(fx.rm.checkpoint_hash_hex() == rm_before);
        for (size_t i = 0; i < fx.worlds.size(); ++i)
            CHECK(fx.worlds[i].checkpoint_hash_hex() == wm_before[i]);
    }

    SUBCASE("empty demos are an error") {
        CHECK_THROWS_AS(few_shot_adapt(theta, fx.rm, fx.worlds, {}, 2, 15, 0.05, 1, 3),
                        argument_error);
    }
}
