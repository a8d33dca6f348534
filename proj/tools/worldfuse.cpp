// Command-line front end. Stages write their artifacts under --out and later
// stages read them back, so the pipeline can run piecemeal:
//   gen-scenes -> collect -> train-wm -> train-rm -> meta-train -> eval / ...
#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

#include "worldfuse/dataset.hpp"
#include "worldfuse/pipeline.hpp"

using namespace worldfuse;
namespace fs = std::filesystem;

namespace {

PipelineConfig load_config(const std::string& config_path, uint64_t seed_override) {
    PipelineConfig cfg = config_path.empty()
                             ? PipelineConfig::defaults()
                             : PipelineConfig::from_json(load_json(config_path));
    if (seed_override != 0) cfg.corpus.seed = seed_override;
    return cfg;
}

void ensure_out(const std::string& out) { fs::create_directories(out); }

void write_config_if_absent(const PipelineConfig& cfg, const std::string& out) {
    std::string path = (fs::path(out) / "config.json").string();
    if (!fs::exists(path)) save_json(path, cfg.to_json());
}

EvalProtocol protocol_from(const PipelineConfig& cfg, int n_shot) {
    EvalProtocol p;
    p.n_shot = n_shot;
    p.seeds = cfg.eval_seeds;
    p.horizon = cfg.corpus.horizon;
    p.threads = cfg.threads;
    return p;
}

void emit_report(const std::string& out, const std::string& name, const MetricsRecord& rec,
                 const nlohmann::json& extra = {}) {
    fs::create_directories(fs::path(out) / "reports");
    write_episode_csv((fs::path(out) / "reports" / (name + ".csv")).string(), rec);
    nlohmann::json j = extra;
    j["metrics"] = metrics_to_json(rec);
    save_json((fs::path(out) / "reports" / (name + ".json")).string(), j);
    std::cout << name << ": SR=" << fmt_double(rec.sr) << " PS=" << fmt_double(rec.ps)
              << " GC=" << fmt_double(rec.gc) << " (" << rec.episodes << " episodes)\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"test-time composition of domain world models with a frozen decision model"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out = "out";
    uint64_t seed = 0;
    app.add_option("--config", config_path, "configuration file (JSON)");
    app.add_option("--out", out, "artifact directory");
    app.add_option("--seed", seed, "override the corpus seed");

    auto* gen = app.add_subcommand("gen-scenes", "generate domains, scenes and instructions");
    auto* collect = app.add_subcommand("collect", "collect expert trajectory datasets");
    auto* train_wm = app.add_subcommand("train-wm", "train the per-domain world models");
    std::string wm_domain = "all";
    train_wm->add_option("--domain", wm_domain, "domain id or 'all'");
    auto* train_rm = app.add_subcommand("train-rm", "pretrain the frozen decision model");
    auto* meta = app.add_subcommand("meta-train", "meta-train the composer");
    std::string fusion = "hierarchical";
    meta->add_option("--fusion", fusion, "hierarchical | concat | add");

    auto* eval = app.add_subcommand("eval", "run an evaluation protocol");
    std::string split = "unseen", variant = "full";
    int n_shot = 0;
    eval->add_option("--split", split, "seen | unseen-scene | unseen");
    eval->add_option("--variant", variant, "bare | full | E | R | F | CONCAT | ADD | expert");
    eval->add_option("--n-shot", n_shot, "few-shot demonstrations (0 = zero-shot)");

    auto* retrieve = app.add_subcommand("retrieve", "print the model distance table for a state");
    std::string ret_domain;
    int ret_instruction = 0;
    retrieve->add_option("--domain", ret_domain, "domain id (defaults to first unseen)");
    retrieve->add_option("--instruction", ret_instruction, "instruction index");

    auto* dump_attn = app.add_subcommand("dump-attn", "run one episode, dump attention masses");
    std::string da_domain;
    int da_instruction = 0;
    dump_attn->add_option("--domain", da_domain, "domain id (defaults to first seen)");
    dump_attn->add_option("--instruction", da_instruction, "instruction index");
    std::string da_split = "seen";
    dump_attn->add_option("--split", da_split, "seen | unseen-scene | unseen");

    auto* ablate = app.add_subcommand("ablate", "paired runs over policy variants");
    std::string ablate_variants = "full,E,R,CONCAT,ADD,F";
    std::string ablate_split = "unseen";
    ablate->add_option("--variants", ablate_variants, "comma-separated variant list");
    ablate->add_option("--split", ablate_split, "evaluation split");

    auto* continual = app.add_subcommand("continual", "incremental model addition curve");
    std::string cont_split = "unseen";
    continual->add_option("--split", cont_split, "evaluation split");

    auto* sweep = app.add_subcommand("sweep", "metrics across composed-model counts");
    std::string sweep_ks = "1,2,3,4,6";
    std::string sweep_split = "unseen";
    sweep->add_option("--k-values", sweep_ks, "comma-separated K list");
    sweep->add_option("--split", sweep_split, "evaluation split");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) {
            PipelineConfig cfg = load_config(config_path, seed);
            ensure_out(out);
            write_config_if_absent(cfg, out);
            Corpus corpus = build_corpus(cfg.corpus);
            fs::create_directories(fs::path(out) / "corpus");
            int scenes = 0, instructions = 0;
            for (const auto& bundles : {corpus.seen, corpus.unseen})
                for (const auto& b : bundles) {
                    fs::path dir = fs::path(out) / "corpus" / b.spec.id;
                    fs::create_directories(dir);
                    auto dump_split = [&](const SceneSplit& sc, const std::string& tag) {
                        save_json((dir / (tag + ".scene.json")).string(), scene_to_json(sc.scene));
                        nlohmann::json ins = nlohmann::json::array();
                        for (const auto& i : sc.train)
                            ins.push_back({{"text", i.text}, {"split", "train"}});
                        for (const auto& i : sc.eval)
                            ins.push_back({{"text", i.text}, {"split", "eval"}});
                        save_json((dir / (tag + ".instructions.json")).string(), ins);
                        ++scenes;
                        instructions += static_cast<int>(sc.train.size() + sc.eval.size());
                    };
                    for (size_t k = 0; k < b.train_scenes.size(); ++k)
                        dump_split(b.train_scenes[k], "train_" + std::to_string(k));
                    for (size_t k = 0; k < b.reasoning_scenes.size(); ++k)
                        dump_split(b.reasoning_scenes[k], "general_" + std::to_string(k));
                    if (b.held_out_scene) dump_split(*b.held_out_scene, "held_out");
                    if (b.eval_scene) dump_split(*b.eval_scene, "eval");
                }
            std::cout << "wrote " << scenes << " scenes, " << instructions
                      << " instructions under " << out << "/corpus\n";
        } else if (collect->parsed()) {
            Artifacts a;
            load_artifacts(a, out, false);
            fs::create_directories(fs::path(out) / "datasets");
            size_t files = 0;
            for (const auto& ds : a.datasets) {
                for (size_t k = 0; k < ds.per_scene.size(); ++k) {
                    const auto& [scene, trajs] = ds.per_scene[k];
                    std::string stem = ds.domain_id + "_scene" + std::to_string(k);
                    save_json((fs::path(out) / "datasets" / (stem + ".scene.json")).string(),
                              scene_to_json(scene));
                    write_trajectories(
                        (fs::path(out) / "datasets" / (stem + ".jsonl")).string(), trajs);
                    ++files;
                }
            }
            std::cout << "wrote " << files << " trajectory files under " << out << "/datasets\n";
        } else if (train_wm->parsed()) {
            Artifacts a;
            load_artifacts(a, out, false);
            fs::create_directories(fs::path(out) / "models");
            const PipelineConfig& c = a.config;
            for (const auto& ds : a.datasets) {
                if (wm_domain != "all" && ds.domain_id != wm_domain) continue;
                WorldModelHandle w = train_world_model(
                    "wm_" + ds.domain_id, ds, c.world_arch, c.world_train,
                    derive_seed(c.corpus.seed, ds.domain_id), c.retrieval.prototype_k);
                auto meta_kv = w.model->config().to_meta();
                meta_kv["id"] = w.id;
                meta_kv["domain"] = w.domain_id;
                meta_kv["provenance"] = join_set(w.provenance);
                save_checkpoint((fs::path(out) / "models" / (w.id + ".ckpt")).string(),
                                w.model->params(), meta_kv);
                save_prototypes((fs::path(out) / "models" / (w.id + ".protos")).string(),
                                w.prototypes, w.domain_id);
                std::cout << "trained " << w.id << " (hash " << w.checkpoint_hash_hex() << ")\n";
            }
        } else if (train_rm->parsed()) {
            Artifacts a;
            load_artifacts(a, out, false);
            TrainReport rep;
            train_reasoning(a, &rep);
            auto meta_kv = a.reasoning.model->config().to_meta();
            meta_kv["provenance"] = join_set(a.reasoning.provenance);
            fs::create_directories(fs::path(out) / "models");
            save_checkpoint((fs::path(out) / "models" / "reasoning.ckpt").string(),
                            a.reasoning.model->params(), meta_kv);
            std::cout << "trained reasoning model: held-out " << fmt_double(rep.held_out_before)
                      << " -> " << fmt_double(rep.held_out_after) << " (hash "
                      << a.reasoning.checkpoint_hash_hex() << ")\n";
        } else if (meta->parsed()) {
            Artifacts a;
            load_artifacts(a, out);
            if (a.worlds.empty() || !a.reasoning.model)
                throw config_error("meta-train requires trained world and reasoning models");
            MetaRunInfo info = train_composer(a, fusion);
            save_checkpoint(
                (fs::path(out) / "models" / ("theta_" + fusion + ".ckpt")).string(),
                a.theta(fusion).params(), a.theta(fusion).config().to_meta());
            save_json((fs::path(out) / "models" / ("meta_manifest_" + fusion + ".json")).string(),
                      meta_manifest(a.config.meta, info, [&] {
                          std::vector<const WorldModelHandle*> ptrs;
                          for (const auto& w : a.worlds) ptrs.push_back(&w);
                          return ptrs;
                      }(), a.reasoning));
            std::cout << "meta-trained composer (" << fusion << "), theta hash "
                      << info.theta_hash << "\n";
        } else if (eval->parsed()) {
            Artifacts a;
            load_artifacts(a, out);
            EvalProtocol proto = protocol_from(a.config, n_shot);
            MetricsRecord rec = n_shot > 0 ? run_few_shot(a, n_shot, proto)
                                           : run_variant(a, variant, split, proto);
            std::string name = "eval_" + split + "_" + variant +
                               (n_shot > 0 ? "_" + std::to_string(n_shot) + "shot" : "");
            emit_report(out, name, rec,
                        {{"split", split}, {"variant", variant}, {"n_shot", n_shot}});
        } else if (retrieve->parsed()) {
            Artifacts a;
            load_artifacts(a, out);
            const DomainBundle* bundle = nullptr;
            for (const auto& b : a.corpus.unseen)
                if (ret_domain.empty() || b.spec.id == ret_domain) bundle = &b;
            for (const auto& b : a.corpus.seen)
                if (b.spec.id == ret_domain) bundle = &b;
            if (!bundle) throw argument_error("unknown domain: " + ret_domain);
            const SceneSplit& sc =
                bundle->seen ? bundle->train_scenes.at(0) : *bundle->eval_scene;
            State st = initial_state(sc.scene);
            std::vector<RetrievalEntry> entries;
            for (const auto& w : a.worlds) entries.push_back({w.id, &w.prototypes});
            std::vector<RankedModel> ranked =
                rank_models(entries, embed_objects(st), a.config.retrieval.prototype_k);
            fs::create_directories(fs::path(out) / "reports");
            std::string path = (fs::path(out) / "reports" / "retrieve.csv").string();
            write_retrieval_csv(path, ranked);
            for (const auto& r : ranked)
                std::cout << r.rank << "," << r.id << "," << fmt_double(r.distance) << "\n";
        } else if (dump_attn->parsed()) {
            Artifacts a;
            load_artifacts(a, out);
            std::vector<EvalCase> cases = cases_for_split(a.corpus, da_split);
            const EvalCase* chosen = nullptr;
            int idx = 0;
            for (const auto& c : cases) {
                if (!da_domain.empty() && c.domain_id != da_domain) continue;
                if (idx++ == da_instruction) chosen = &c;
            }
            if (!chosen) throw argument_error("no such episode");
            auto factory = make_variant_factory(a, "full");
            std::unique_ptr<ActionPolicy> policy = factory();
            EpisodeResult ep =
                run_episode(*policy, *chosen->scene, *chosen->instruction, a.config.corpus.horizon,
                            derive_seed(a.config.eval_seeds.at(0), chosen->domain_id), true);
            fs::create_directories(fs::path(out) / "reports");
            std::string path = (fs::path(out) / "reports" / "attention.csv").string();
            write_attention_csv(path, ep);
            std::cout << "episode '" << ep.instruction << "' "
                      << (ep.success ? "succeeded" : "failed") << " in " << ep.steps
                      << " steps; masses written to " << path << "\n";
        } else if (ablate->parsed()) {
            Artifacts a;
            load_artifacts(a, out);
            EvalProtocol proto = protocol_from(a.config, 0);
            std::istringstream vs(ablate_variants);
            std::string v;
            while (std::getline(vs, v, ',')) {
                MetricsRecord rec = run_variant(a, v, ablate_split, proto);
                emit_report(out, "ablate_" + ablate_split + "_" + v, rec,
                            {{"split", ablate_split}, {"variant", v}});
            }
        } else if (continual->parsed()) {
            Artifacts a;
            load_artifacts(a, out);
            EvalProtocol proto = protocol_from(a.config, 0);
            std::vector<ContinualPoint> curve = run_continual(a, cont_split, proto);
            fs::create_directories(fs::path(out) / "reports");
            std::ofstream f((fs::path(out) / "reports" / "continual.csv").string());
            f << "event,sr,ps,gc\n";
            for (const auto& p : curve) {
                f << p.event << "," << fmt_double(p.metrics.sr) << ","
                  << fmt_double(p.metrics.ps) << "," << fmt_double(p.metrics.gc) << "\n";
                std::cout << p.event << ": SR=" << fmt_double(p.metrics.sr) << "\n";
            }
            for (const auto& b : a.corpus.seen) {
                RemovalEffect eff = run_removal(a, b.spec.id, "unseen-scene", proto);
                std::cout << "remove matched model for " << b.spec.id
                          << ": SR " << fmt_double(eff.with_model.sr) << " -> "
                          << fmt_double(eff.without_model.sr) << "\n";
            }
        } else if (sweep->parsed()) {
            Artifacts a;
            load_artifacts(a, out);
            EvalProtocol proto = protocol_from(a.config, 0);
            std::vector<int> ks;
            std::istringstream ss(sweep_ks);
            std::string tok;
            while (std::getline(ss, tok, ',')) ks.push_back(std::stoi(tok));
            auto table = scaling_sweep(a, ks, sweep_split, proto);
            fs::create_directories(fs::path(out) / "reports");
            std::ofstream f((fs::path(out) / "reports" / "sweep.csv").string());
            f << "k,sr,ps,gc\n";
            for (const auto& [k, rec] : table) {
                f << k << "," << fmt_double(rec.sr) << "," << fmt_double(rec.ps) << ","
                  << fmt_double(rec.gc) << "\n";
                std::cout << "K=" << k << ": SR=" << fmt_double(rec.sr)
                          << " PS=" << fmt_double(rec.ps) << "\n";
            }
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
