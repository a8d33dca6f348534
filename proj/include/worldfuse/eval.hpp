// Experiment protocols and metrics: episode rollouts under pluggable action
// policies, success-rate / pending-steps / goal-condition metrics with
// seed-level confidence intervals, ablation and scaling sweeps, continual
// model addition/removal curves, and deterministic CSV/JSON reports.
#pragma once

#include <cstdio>
#include <fstream>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "compound.hpp"
#include "meta.hpp"
#include "reasoning.hpp"
#include "sim.hpp"

namespace worldfuse {

// ---------------------------------------------------------------------------
// Action policies
// ---------------------------------------------------------------------------

struct MassRow {
    std::string model_id;
    double mass;
};

// A policy picks one action given the live state. `masses_out`, when
// non-null, receives the world-level attention bookkeeping of this decision.
struct ActionPolicy {
    virtual ~ActionPolicy() = default;
    virtual std::string act(const Scene& scene, const ActionGrammar& grammar, const State& st,
                            const Instruction& instr, std::vector<MassRow>* masses_out) = 0;
    virtual void begin_episode(uint64_t /*seed*/) {}
};

// Oracle: replans with breadth-first search every step.
class ExpertPolicy : public ActionPolicy {
public:
    explicit ExpertPolicy(int horizon) : horizon_(horizon) {}
    std::string act(const Scene& scene, const ActionGrammar&, const State& st,
                    const Instruction& instr, std::vector<MassRow>*) override {
        std::vector<std::string> plan = plan_expert(scene, st, instr.goal, horizon_);
        if (plan.empty()) throw contract_error("expert asked to act on a satisfied goal");
        return plan.front();
    }

private:
    int horizon_;
};

class BarePolicy : public ActionPolicy {
public:
    explicit BarePolicy(const ReasoningModel& rm) : rm_(rm) {}
    std::string act(const Scene& scene, const ActionGrammar& grammar, const State& st,
                    const Instruction& instr, std::vector<MassRow>*) override {
        BareSession sess(*rm_.model);
        return decode_action(sess, grammar, seq::policy_prompt(instr, st));
    }

private:
    const ReasoningModel& rm_;
};

// Model-selection rules for the composed policy.
enum class SelectionRule {
    Retrieval,   // prototype distances, top K
    All,         // every available model
    Random,      // random K-subset, drawn once per episode
    TopOne,      // single most relevant model
};

inline const char* selection_rule_name(SelectionRule r) {
    switch (r) {
        case SelectionRule::Retrieval: return "retrieval";
        case SelectionRule::All: return "all";
        case SelectionRule::Random: return "random";
        case SelectionRule::TopOne: return "top-one";
    }
    return "?";
}

// Composed policy with per-step model selection. Retrieval is recomputed when
// the state's object sub-states change (cache keyed on their hash).
class ComposedEvalPolicy : public ActionPolicy {
public:
    ComposedEvalPolicy(const ReasoningModel& rm, const std::vector<WorldModelHandle>& pool,
                       const CompoundAttention& theta, int top_k, int prototype_k,
                       SelectionRule rule = SelectionRule::Retrieval,
                       CompoundAttention::Fusion fusion = CompoundAttention::Fusion::Hierarchical,
                       TapCache* tap_cache = nullptr)
        : rm_(rm),
          pool_(pool),
          theta_(theta),
          top_k_(top_k),
          prototype_k_(prototype_k),
          rule_(rule),
          fusion_(fusion),
          tap_cache_(tap_cache) {
        if (pool_.empty()) throw argument_error("composed policy: empty model pool");
    }

    void begin_episode(uint64_t seed) override {
        retrieval_cache_.clear();
        random_subset_.clear();
        if (rule_ == SelectionRule::Random) {
            Rng rng(derive_seed(seed, "random-subset"));
            int k = std::min<int>(top_k_, static_cast<int>(pool_.size()));
            std::vector<int> idx =
                rng.sample_without_replacement(static_cast<int>(pool_.size()), k);
            for (int i : idx) random_subset_.push_back(&pool_[static_cast<size_t>(i)]);
        }
    }

    std::string act(const Scene& scene, const ActionGrammar& grammar, const State& st,
                    const Instruction& instr, std::vector<MassRow>* masses_out) override {
        std::vector<const WorldModelHandle*> worlds = select(st);
        ComposedPolicy p = ComposedPolicy::make(rm_, worlds, theta_, fusion_, tap_cache_);
        ComposedSession sess(p);
        std::string action = decode_action(sess, grammar, seq::policy_prompt(instr, st));
        if (masses_out) {
            masses_out->clear();
            const auto& masses = sess.masses();
            for (size_t m = 0; m < masses.size(); ++m)
                masses_out->push_back({sess.policy().worlds[m]->id, masses[m]});
        }
        return action;
    }

private:
    std::vector<const WorldModelHandle*> select(const State& st) {
        switch (rule_) {
            case SelectionRule::All: {
                std::vector<const WorldModelHandle*> out;
                for (const auto& w : pool_) out.push_back(&w);
                return out;
            }
            case SelectionRule::Random:
                return random_subset_;
            case SelectionRule::TopOne:
            case SelectionRule::Retrieval: {
                uint64_t key = substate_hash(st);
                auto it = retrieval_cache_.find(key);
                if (it != retrieval_cache_.end()) return it->second;
                int k = rule_ == SelectionRule::TopOne ? 1
                                                       : std::min<int>(top_k_, static_cast<int>(pool_.size()));
                std::vector<const WorldModelHandle*> out =
                    retrieve_for_state(pool_, st, k, prototype_k_);
                retrieval_cache_[key] = out;
                return out;
            }
        }
        throw argument_error("unknown selection rule");
    }

    static uint64_t substate_hash(const State& st) {
        uint64_t h = 0xcbf29ce484222325ull;
        for (const auto& [obj, tokens] : object_substates(st))
            for (const auto& t : tokens) h = fnv1a64(t + "|", h);
        return h;
    }

    const ReasoningModel& rm_;
    const std::vector<WorldModelHandle>& pool_;
    const CompoundAttention& theta_;
    int top_k_;
    int prototype_k_;
    SelectionRule rule_;
    CompoundAttention::Fusion fusion_;
    TapCache* tap_cache_;
    std::map<uint64_t, std::vector<const WorldModelHandle*>> retrieval_cache_;
    std::vector<const WorldModelHandle*> random_subset_;
};

// ---------------------------------------------------------------------------
// Episodes and metrics
// ---------------------------------------------------------------------------

struct EpisodeResult {
    std::string domain_id;
    std::string scene_id;
    std::string instruction;
    int seed_index = 0;
    uint64_t episode_seed = 0;
    bool success = false;
    int steps = 0;
    int subgoals_met = 0;
    int subgoals_total = 0;
    std::vector<std::string> actions;
    std::vector<std::vector<MassRow>> masses_per_step;
};

inline EpisodeResult run_episode(ActionPolicy& policy, const Scene& scene,
                                 const Instruction& instr, int horizon, uint64_t seed,
                                 bool record_masses = false) {
    EpisodeResult res;
    res.scene_id = scene.id;
    res.instruction = instr.text;
    res.episode_seed = seed;
    res.subgoals_total = static_cast<int>(instr.goal.size());
    policy.begin_episode(seed);
    ActionGrammar grammar(scene);
    State st = initial_state(scene);
    int taken = 0;
    while (true) {
        if (goal_satisfied(st, instr.goal)) {
            res.success = true;
            break;
        }
        if (taken >= horizon) break;
        std::vector<MassRow> masses;
        std::string action =
            policy.act(scene, grammar, st, instr, record_masses ? &masses : nullptr);
        if (record_masses) res.masses_per_step.push_back(std::move(masses));
        res.actions.push_back(action);
        st = step(scene, st, action);
        ++taken;
    }
    res.steps = res.success ? taken : horizon;
    for (const auto& g : instr.goal) res.subgoals_met += st.has(g) ? 1 : 0;
    return res;
}

struct MetricsRecord {
    double sr = 0.0, ps = 0.0, gc = 0.0;
    double sr_half = 0.0, ps_half = 0.0, gc_half = 0.0;  // 95% over seeds
    int episodes = 0;
    std::vector<EpisodeResult> rows;
};

// SR = mean success; PS = mean steps with failures counted at the horizon
// (already folded into EpisodeResult::steps); GC = mean sub-goal fraction.
// Half-widths are normal-approximation 95% intervals over per-seed means.
inline MetricsRecord compute_metrics(std::vector<EpisodeResult> episodes) {
    if (episodes.empty()) throw argument_error("compute_metrics: no episodes");
    MetricsRecord rec;
    rec.episodes = static_cast<int>(episodes.size());
    std::map<int, std::vector<const EpisodeResult*>> by_seed;
    for (const auto& e : episodes) by_seed[e.seed_index].push_back(&e);

    auto mean_of = [](const std::vector<double>& v) {
        double acc = 0.0;
        for (double x : v) acc += x;
        return v.empty() ? 0.0 : acc / static_cast<double>(v.size());
    };
    std::vector<double> seed_sr, seed_ps, seed_gc;
    for (const auto& [si, rows] : by_seed) {
        std::vector<double> sr, ps, gc;
        for (const auto* e : rows) {
            sr.push_back(e->success ? 1.0 : 0.0);
            ps.push_back(static_cast<double>(e->steps));
            gc.push_back(e->subgoals_total
                             ? static_cast<double>(e->subgoals_met) / e->subgoals_total
                             : 1.0);
        }
        seed_sr.push_back(mean_of(sr));
        seed_ps.push_back(mean_of(ps));
        seed_gc.push_back(mean_of(gc));
    }
    auto half_width = [&](const std::vector<double>& v) {
        if (v.size() < 2) return 0.0;
        double mu = mean_of(v), var = 0.0;
        for (double x : v) var += (x - mu) * (x - mu);
        var /= static_cast<double>(v.size() - 1);
        return 1.96 * std::sqrt(var / static_cast<double>(v.size()));
    };
    rec.sr = mean_of(seed_sr);
    rec.ps = mean_of(seed_ps);
    rec.gc = mean_of(seed_gc);
    rec.sr_half = half_width(seed_sr);
    rec.ps_half = half_width(seed_ps);
    rec.gc_half = half_width(seed_gc);
    rec.rows = std::move(episodes);
    return rec;
}

// ---------------------------------------------------------------------------
// Protocols
// ---------------------------------------------------------------------------

struct EvalCase {
    std::string domain_id;
    const Scene* scene;
    const Instruction* instruction;
};

struct EvalProtocol {
    std::string split;  // "seen", "unseen-scene", "unseen"
    int n_shot = 0;
    std::vector<uint64_t> seeds;
    int horizon = 30;
    int threads = 0;
};

using PolicyFactory = std::function<std::unique_ptr<ActionPolicy>()>;

// Runs every (case, seed) pair. Episode seeds derive from (seed, domain,
// instruction) only, so different policies see identical draws.
inline MetricsRecord run_protocol(const PolicyFactory& make_policy,
                                  const std::vector<EvalCase>& cases,
                                  const EvalProtocol& protocol, bool record_masses = false) {
    if (cases.empty()) throw argument_error("run_protocol: no evaluation cases");
    if (protocol.seeds.empty()) throw argument_error("run_protocol: no seeds");
    struct Job {
        const EvalCase* c;
        int seed_index;
        uint64_t seed;
    };
    std::vector<Job> jobs;
    for (size_t si = 0; si < protocol.seeds.size(); ++si)
        for (const auto& c : cases)
            jobs.push_back({&c, static_cast<int>(si),
                            derive_seed(derive_seed(protocol.seeds[si], c.domain_id),
                                        fnv1a64(c.instruction->text))});
    std::vector<EpisodeResult> results(jobs.size());
    parallel_for(
        jobs.size(),
        [&](size_t i) {
            std::unique_ptr<ActionPolicy> policy = make_policy();
            EpisodeResult r = run_episode(*policy, *jobs[i].c->scene, *jobs[i].c->instruction,
                                          protocol.horizon, jobs[i].seed, record_masses);
            r.domain_id = jobs[i].c->domain_id;
            r.seed_index = jobs[i].seed_index;
            results[i] = std::move(r);
        },
        protocol.threads);
    return compute_metrics(std::move(results));
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

inline void write_episode_csv(const std::string& path, const MetricsRecord& rec) {
    std::ofstream f(path);
    if (!f) throw io_error("cannot open for write: " + path);
    f << "domain,scene,instruction,seed_index,episode_seed,success,steps,subgoals_met,"
         "subgoals_total\n";
    for (const auto& e : rec.rows)
        f << e.domain_id << "," << e.scene_id << "," << e.instruction << "," << e.seed_index
          << "," << e.episode_seed << "," << (e.success ? 1 : 0) << "," << e.steps << ","
          << e.subgoals_met << "," << e.subgoals_total << "\n";
}

inline void write_attention_csv(const std::string& path, const EpisodeResult& episode) {
    std::ofstream f(path);
    if (!f) throw io_error("cannot open for write: " + path);
    f << "timestep,model_id,mass\n";
    for (size_t t = 0; t < episode.masses_per_step.size(); ++t)
        for (const auto& row : episode.masses_per_step[t])
            f << t << "," << row.model_id << "," << fmt_double(row.mass) << "\n";
}

inline void write_retrieval_csv(const std::string& path, const std::vector<RankedModel>& ranked) {
    std::ofstream f(path);
    if (!f) throw io_error("cannot open for write: " + path);
    f << "model_id,delta,rank\n";
    for (const auto& r : ranked)
        f << r.id << "," << fmt_double(r.distance) << "," << r.rank << "\n";
}

inline nlohmann::json metrics_to_json(const MetricsRecord& rec) {
    return {{"sr", rec.sr},           {"ps", rec.ps},           {"gc", rec.gc},
            {"sr_half", rec.sr_half}, {"ps_half", rec.ps_half}, {"gc_half", rec.gc_half},
            {"episodes", rec.episodes}};
}

// Re-derives the aggregate numbers from per-episode rows; the report is
// self-auditing.
inline void verify_metrics_consistency(const MetricsRecord& rec) {
    MetricsRecord re = compute_metrics(rec.rows);
    if (std::fabs(re.sr - rec.sr) > 1e-12 || std::fabs(re.ps - rec.ps) > 1e-12 ||
        std::fabs(re.gc - rec.gc) > 1e-12)
        throw contract_error("metrics record does not match its per-episode rows");
}

}  // namespace worldfuse
