// The frozen decision-making model: pretrained on pooled seen-domain cloning
// data, then locked. Provides grammar-constrained greedy action decoding; the
// grammar trie guarantees every decoded string parses.
#pragma once

#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "model.hpp"
#include "sim.hpp"
#include "vocab.hpp"
#include "world_model.hpp"

namespace worldfuse {

struct ReasoningModel {
    std::shared_ptr<Transformer> model;  // params frozen after pretraining
    std::set<std::string> provenance;

    std::string checkpoint_hash_hex() const {
        return checkpoint_hash(model->params(), model->config().to_meta());
    }
};

inline ReasoningModel pretrain_reasoning(const std::vector<DomainDataset>& datasets,
                                         const ModelConfig& arch, const LmTrainConfig& cfg,
                                         uint64_t seed, TrainReport* report_out = nullptr) {
    ReasoningModel rm;
    rm.model = std::make_shared<Transformer>(arch, derive_seed(seed, "reasoning"));

    std::vector<SeqExample> pool, held_out;
    for (const auto& ds : datasets) {
        for (const auto& [scene, trajs] : ds.per_scene) {
            size_t n_held = static_cast<size_t>(std::ceil(cfg.held_out_fraction *
                                                          static_cast<double>(trajs.size())));
            for (size_t i = 0; i < trajs.size(); ++i) {
                auto& dst = (i + n_held >= trajs.size()) ? held_out : pool;
                for (const auto& s : trajs[i].steps)
                    dst.push_back(seq::cloning_example(trajs[i].instruction, s.before, s.action,
                                                       trajs[i].domain_id));
                if (i + n_held < trajs.size()) rm.provenance.insert(ds.domain_id);
            }
        }
    }
    if (pool.empty()) throw argument_error("pretrain_reasoning: empty pooled dataset");
    if (held_out.empty()) held_out = pool;

    Rng rng(derive_seed(seed, "rm-train"));
    TrainReport report;
    report.held_out_before = detail::mean_loss_no_grad(*rm.model, held_out);
    AdamState adam;
    for (int step = 0; step < cfg.gradient_steps; ++step) {
        std::vector<const SeqExample*> batch;
        for (int b = 0; b < cfg.batch_size; ++b)
            batch.push_back(&pool[static_cast<size_t>(rng.uniform_int(static_cast<int>(pool.size())))]);
        double lr = cfg.cosine ? cosine_lr(cfg.lr, step, cfg.gradient_steps) : cfg.lr;
        if (lr > 0.0) detail::train_step(*rm.model, batch, lr, cfg.adam ? &adam : nullptr);
        report.steps++;
    }
    report.held_out_after = detail::mean_loss_no_grad(*rm.model, held_out);
    if (report_out) *report_out = report;
    rm.model->freeze();
    return rm;
}

// ---------------------------------------------------------------------------
// Grammar-constrained decoding
// ---------------------------------------------------------------------------

// Prefix trie over the token renderings of every parseable action in a scene.
// Terminal nodes admit only the end-of-action token.
class ActionGrammar {
public:
    explicit ActionGrammar(const Scene& scene) {
        nodes_.push_back({});
        for (const auto& a : parseable_actions(scene)) {
            int cur = 0;
            for (const auto& w : split_words(a)) {
                int id = vocab().id(w);
                auto it = nodes_[static_cast<size_t>(cur)].next.find(id);
                if (it == nodes_[static_cast<size_t>(cur)].next.end()) {
                    nodes_.push_back({});
                    int idx = static_cast<int>(nodes_.size()) - 1;
                    nodes_[static_cast<size_t>(cur)].next[id] = idx;
                    cur = idx;
                } else {
                    cur = it->second;
                }
            }
            nodes_[static_cast<size_t>(cur)].terminal = true;
        }
    }

    // Legal continuations after a partial action; <eoa> once complete.
    std::vector<int> legal_next(const std::vector<int>& prefix) const {
        int cur = 0;
        for (int id : prefix) {
            auto it = nodes_[static_cast<size_t>(cur)].next.find(id);
            if (it == nodes_[static_cast<size_t>(cur)].next.end())
                throw contract_error("action prefix leaves the grammar");
            cur = it->second;
        }
        std::vector<int> out;
        const Node& n = nodes_[static_cast<size_t>(cur)];
        for (const auto& [id, child] : n.next) out.push_back(id);
        if (n.terminal) out.push_back(vocab().eoa());
        return out;
    }

private:
    struct Node {
        std::map<int, int> next;
        bool terminal = false;
    };
    std::vector<Node> nodes_;
};

// Incremental decoding interface: prime with a prompt, then alternate
// next_logits()/accept(token).
struct DecodeSession {
    virtual ~DecodeSession() = default;
    virtual void prime(const std::vector<int>& prompt) = 0;
    virtual std::vector<double> next_logits() = 0;
    virtual void accept(int token) = 0;
};

// Plain frozen-model session (no composition).
class BareSession : public DecodeSession {
public:
    explicit BareSession(const Transformer& model) : model_(model) {}

    void prime(const std::vector<int>& prompt) override {
        autodiff::NoGradGuard ng;
        Tensor logits = model_.forward(prompt, nullptr, nullptr, &cache_);
        int last = logits.dim(0) - 1;
        pending_.assign(logits.data().begin() + static_cast<size_t>(last) * logits.dim(1),
                        logits.data().end());
    }
    std::vector<double> next_logits() override { return pending_; }
    void accept(int token) override {
        autodiff::NoGradGuard ng;
        pending_ = model_.decode_step(cache_, token);
    }

private:
    const Transformer& model_;
    KvCache cache_;
    std::vector<double> pending_;
};

// Greedy decode of one action after the prompt, masked to grammar-legal
// continuations; total by construction.
inline std::string decode_action(DecodeSession& session, const ActionGrammar& grammar,
                                 const std::vector<int>& prompt) {
    session.prime(prompt);
    std::vector<int> prefix;
    const int max_action_tokens = 8;
    for (int step = 0; step < max_action_tokens; ++step) {
        std::vector<double> logits = session.next_logits();
        std::vector<int> legal = grammar.legal_next(prefix);
        if (legal.empty()) throw contract_error("grammar admits no continuation");
        int best = legal[0];
        for (int id : legal)
            if (logits[static_cast<size_t>(id)] > logits[static_cast<size_t>(best)]) best = id;
        if (best == vocab().eoa()) break;
        prefix.push_back(best);
        session.accept(best);
    }
    std::vector<std::string> words;
    for (int id : prefix) words.push_back(vocab().word(id));
    std::string out;
    for (size_t i = 0; i < words.size(); ++i) {
        if (i) out += " ";
        out += words[i];
    }
    return out;
}

}  // namespace worldfuse
