// Closed vocabulary derived from the object/relation/action lexicons, plus the
// token renderings of states, prompts and auxiliary-task sequences. Prompts
// follow the Instruction: / Observation: / Action: shape; triples are sorted
// before rendering so tokenization is deterministic.
#pragma once

#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "common.hpp"
#include "domains.hpp"
#include "sim.hpp"

namespace worldfuse {

class Vocabulary {
public:
    Vocabulary() {
        // Specials first, fixed order.
        for (const char* s : {"<pad>", "<eoa>", "<sep>", "<tgt>", "<act>", "<dyn>", "<aff>",
                              "<add>", "<del>", "<nochange>"})
            push(s);
        std::set<std::string> words;
        words.insert("character");
        words.insert("none");
        for (const char* w : {"inside", "on", "hold", "adjacent", "is"}) words.insert(w);
        for (const char* w : {"open", "closed", "off"}) words.insert(w);
        for (const char* w : {"walk", "grab", "put", "putin", "switchon"}) words.insert(w);
        for (const char* w : {"turnon", "puton", "placein"}) words.insert(w);
        for (const char* w : {"instruction:", "observation:", "action:"}) words.insert(w);
        for (const auto& a : archetypes()) {
            words.insert(a.room);
            for (const auto& e : a.furniture) words.insert(e.name);
            for (const auto& e : a.grabbables) words.insert(e.name);
        }
        for (const auto& w : words) push(w);
    }

    int id(const std::string& w) const {
        auto it = index_.find(w);
        if (it == index_.end()) throw argument_error("token not in vocabulary: " + w);
        return it->second;
    }
    const std::string& word(int id) const {
        if (id < 0 || id >= static_cast<int>(words_.size()))
            throw argument_error("token id out of range: " + std::to_string(id));
        return words_[static_cast<size_t>(id)];
    }
    int size() const { return static_cast<int>(words_.size()); }

    int pad() const { return 0; }
    int eoa() const { return 1; }
    int sep() const { return 2; }
    int tgt() const { return 3; }
    int task_act() const { return 4; }
    int task_dyn() const { return 5; }
    int task_aff() const { return 6; }
    int add_mark() const { return 7; }
    int del_mark() const { return 8; }
    int nochange() const { return 9; }

    std::vector<int> encode(const std::vector<std::string>& ws) const {
        std::vector<int> out;
        out.reserve(ws.size());
        for (const auto& w : ws) out.push_back(id(w));
        return out;
    }
    std::string decode(const std::vector<int>& ids) const {
        std::string out;
        for (size_t i = 0; i < ids.size(); ++i) {
            if (i) out += " ";
            out += word(ids[i]);
        }
        return out;
    }

private:
    void push(const std::string& w) {
        index_[w] = static_cast<int>(words_.size());
        words_.push_back(w);
    }
    std::vector<std::string> words_;
    std::unordered_map<std::string, int> index_;
};

// Process-wide vocabulary; the lexicons are static so this is a constant.
inline const Vocabulary& vocab() {
    static const Vocabulary v;
    return v;
}

// One training sequence: next-token targets with a loss mask selecting the
// target segment only.
struct SeqExample {
    std::vector<int> tokens;
    std::vector<int> targets;   // targets[t] = tokens[t+1]
    std::vector<char> mask;     // 1 where the prediction is scored
    size_t prompt_len = 0;      // tokens before the target segment
    std::string provenance;     // domain id the example came from
};

namespace seq {

inline void append_triples(std::vector<int>& out, const State& st) {
    const Vocabulary& v = vocab();
    for (const auto& t : st.triples) {  // std::set: already sorted
        out.push_back(v.id(t.s));
        out.push_back(v.id(t.r));
        out.push_back(v.id(t.o));
    }
}

inline void append_words(std::vector<int>& out, const std::string& text) {
    const Vocabulary& v = vocab();
    for (const auto& w : split_words(text)) out.push_back(v.id(w));
}

// "<act> instruction: ... observation: ... action:" -- the policy prompt, and
// the prompt every composed model sees (identical tokens, aligned positions).
inline std::vector<int> policy_prompt(const Instruction& instr, const State& st) {
    const Vocabulary& v = vocab();
    std::vector<int> out;
    out.push_back(v.task_act());
    out.push_back(v.id("instruction:"));
    append_words(out, instr.text);
    out.push_back(v.id("observation:"));
    append_triples(out, st);
    out.push_back(v.id("action:"));
    return out;
}

// Mark [target_begin, end) as the scored segment of `tokens`.
inline SeqExample make_example(std::vector<int> tokens, size_t target_begin,
                               const std::string& provenance) {
    SeqExample ex;
    ex.tokens = std::move(tokens);
    size_t n = ex.tokens.size();
    ex.targets.assign(n, 0);
    ex.mask.assign(n, 0);
    ex.prompt_len = target_begin;
    for (size_t t = 0; t + 1 < n; ++t) {
        ex.targets[t] = ex.tokens[t + 1];
        if (t + 1 >= target_begin) ex.mask[t] = 1;
    }
    ex.provenance = provenance;
    return ex;
}

inline SeqExample cloning_example(const Instruction& instr, const State& st,
                                  const std::string& action, const std::string& provenance) {
    std::vector<int> toks = policy_prompt(instr, st);
    size_t begin = toks.size();
    append_words(toks, action);
    toks.push_back(vocab().eoa());
    return make_example(std::move(toks), begin, provenance);
}

// "<dyn> observation: ... action: a <tgt> <add> ... <del> ... <eoa>"
// The target is the triple-set difference between successor and state.
inline SeqExample dynamics_example(const State& st, const std::string& action,
                                   const State& nxt, const std::string& provenance) {
    const Vocabulary& v = vocab();
    std::vector<int> toks;
    toks.push_back(v.task_dyn());
    toks.push_back(v.id("observation:"));
    append_triples(toks, st);
    toks.push_back(v.id("action:"));
    append_words(toks, action);
    toks.push_back(v.tgt());
    size_t begin = toks.size();
    std::vector<Triple> added, removed;
    for (const auto& t : nxt.triples)
        if (!st.triples.count(t)) added.push_back(t);
    for (const auto& t : st.triples)
        if (!nxt.triples.count(t)) removed.push_back(t);
    if (added.empty() && removed.empty()) {
        toks.push_back(v.nochange());
    } else {
        if (!added.empty()) {
            toks.push_back(v.add_mark());
            for (const auto& t : added) append_words(toks, t.str());
        }
        if (!removed.empty()) {
            toks.push_back(v.del_mark());
            for (const auto& t : removed) append_words(toks, t.str());
        }
    }
    toks.push_back(v.eoa());
    return make_example(std::move(toks), begin, provenance);
}

// "<aff> observation: ... <tgt> a1 <sep> a2 ... <eoa>" with the sorted
// feasible-action set as the target.
inline SeqExample affordance_example(const Scene& scene, const State& st,
                                     const std::string& provenance) {
    const Vocabulary& v = vocab();
    std::vector<int> toks;
    toks.push_back(v.task_aff());
    toks.push_back(v.id("observation:"));
    append_triples(toks, st);
    toks.push_back(v.tgt());
    size_t begin = toks.size();
    std::vector<std::string> feas = feasible_actions(scene, st);
    for (size_t i = 0; i < feas.size(); ++i) {
        if (i) toks.push_back(v.sep());
        append_words(toks, feas[i]);
    }
    toks.push_back(v.eoa());
    return make_example(std::move(toks), begin, provenance);
}

}  // namespace seq

}  // namespace worldfuse
