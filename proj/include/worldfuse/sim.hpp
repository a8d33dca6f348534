// Deterministic multi-room household simulator. States are sets of
// (subject, relation, object) triples; actions follow a small typed grammar
// (walk/grab/open/put/putin/switchon). Infeasible-but-parseable actions leave
// the state unchanged apart from the step counter; unparseable text is an
// error. A breadth-first expert planner provides shortest demonstrations.
#pragma once

#include <algorithm>
#include <deque>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_set>
#include <vector>

#include "common.hpp"

namespace worldfuse {

struct Triple {
    std::string s, r, o;
    auto operator<=>(const Triple&) const = default;
    std::string str() const { return s + " " + r + " " + o; }
};

struct ObjectInfo {
    std::string room;          // home room at scene construction
    bool grabbable = false;
    bool openable = false;
    bool switchable = false;
    bool container = false;
    bool surface = false;
    // initial placement: relation "inside"/"on", target room or object id
    std::string place_rel = "inside";
    std::string place_target;
    bool init_open = false;
};

struct Scene {
    std::string id;
    std::vector<std::string> rooms;                      // insertion order
    std::map<std::string, ObjectInfo> objects;           // sorted by id
    std::vector<std::pair<std::string, std::string>> adjacency;  // normalized a<b
    std::string start_room;

    bool is_room(const std::string& name) const {
        return std::find(rooms.begin(), rooms.end(), name) != rooms.end();
    }
    bool has_object(const std::string& name) const { return objects.count(name) != 0; }

    bool adjacent(const std::string& a, const std::string& b) const {
        auto p = a < b ? std::make_pair(a, b) : std::make_pair(b, a);
        return std::find(adjacency.begin(), adjacency.end(), p) != adjacency.end();
    }

    uint64_t hash() const {
        uint64_t h = fnv1a64(id);
        for (const auto& r : rooms) h = fnv1a64(r, h);
        for (const auto& [name, o] : objects) {
            h = fnv1a64(name, h);
            h = fnv1a64(o.room, h);
            int flags = o.grabbable | (o.openable << 1) | (o.switchable << 2) |
                        (o.container << 3) | (o.surface << 4) | (o.init_open << 5);
            h = fnv1a64(&flags, sizeof(flags), h);
            h = fnv1a64(o.place_rel, h);
            h = fnv1a64(o.place_target, h);
        }
        for (const auto& [a, b] : adjacency) h = fnv1a64(a + "|" + b, h);
        return fnv1a64(start_room, h);
    }
};

struct State {
    std::set<Triple> triples;
    int step = 0;

    bool has(const Triple& t) const { return triples.count(t) != 0; }

    std::string character_room() const {
        for (const auto& t : triples)
            if (t.s == "character" && t.r == "inside") return t.o;
        throw contract_error("state has no character location");
    }

    std::string held_object() const {
        for (const auto& t : triples)
            if (t.s == "character" && t.r == "hold") return t.o;
        throw contract_error("state has no hold triple");
    }

    // Support relation of an object: ("inside", room) | ("on", x) | ("inside", c)
    std::optional<std::pair<std::string, std::string>> location_of(const std::string& obj) const {
        for (const auto& t : triples)
            if (t.s == obj && (t.r == "inside" || t.r == "on")) return std::make_pair(t.r, t.o);
        return std::nullopt;
    }

    bool flag_is(const std::string& obj, const std::string& value) const {
        return has({obj, "is", value});
    }

    // Content hash over triples only; the step counter is bookkeeping.
    uint64_t hash() const {
        uint64_t h = 0xcbf29ce484222325ull;
        for (const auto& t : triples) h = fnv1a64(t.str() + ";", h);
        return h;
    }
};

enum class TaskType { TurnOn, Open, PutOn, PlaceIn };

inline const char* task_type_name(TaskType t) {
    switch (t) {
        case TaskType::TurnOn: return "turnon";
        case TaskType::Open: return "open";
        case TaskType::PutOn: return "puton";
        case TaskType::PlaceIn: return "placein";
    }
    return "?";
}

inline TaskType task_type_from(const std::string& s) {
    if (s == "turnon") return TaskType::TurnOn;
    if (s == "open") return TaskType::Open;
    if (s == "puton") return TaskType::PutOn;
    if (s == "placein") return TaskType::PlaceIn;
    throw argument_error("unknown task type: " + s);
}

struct Instruction {
    std::string text;  // e.g. "puton apple desk"
    std::vector<Triple> goal;
    TaskType task_type = TaskType::TurnOn;
};

struct TrajStep {
    State before;
    std::string action;
    State after;
};

struct Trajectory {
    std::string domain_id;
    std::string scene_id;
    Instruction instruction;
    std::vector<TrajStep> steps;
    bool success = false;
};

// ---------------------------------------------------------------------------
// Grammar
// ---------------------------------------------------------------------------

struct Action {
    std::string verb;
    std::string arg1;
    std::string arg2;  // empty for unary verbs
    std::string str() const { return arg2.empty() ? verb + " " + arg1 : verb + " " + arg1 + " " + arg2; }
};

inline std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> out;
    size_t i = 0;
    while (i < text.size()) {
        while (i < text.size() && text[i] == ' ') ++i;
        size_t j = i;
        while (j < text.size() && text[j] != ' ') ++j;
        if (j > i) out.push_back(text.substr(i, j - i));
        i = j;
    }
    return out;
}

// Typed-slot parse. Slot types (grabbable / openable / switchable / container)
// are static object properties; room/location conditions are feasibility, not
// grammar.
inline Action parse_action(const Scene& scene, const std::string& text) {
    std::vector<std::string> w = split_words(text);
    if (w.empty()) throw parse_error("empty action");
    const std::string& verb = w[0];
    auto need_args = [&](size_t n) {
        if (w.size() != n + 1)
            throw parse_error("action '" + text + "': wrong argument count");
    };
    auto obj = [&](const std::string& name) -> const ObjectInfo& {
        auto it = scene.objects.find(name);
        if (it == scene.objects.end()) throw parse_error("unknown object: " + name);
        return it->second;
    };
    if (verb == "walk") {
        need_args(1);
        if (!scene.is_room(w[1]) && !scene.has_object(w[1]))
            throw parse_error("walk: unknown destination " + w[1]);
        return {verb, w[1], ""};
    }
    if (verb == "grab") {
        need_args(1);
        if (!obj(w[1]).grabbable) throw parse_error("grab: not a grabbable object: " + w[1]);
        return {verb, w[1], ""};
    }
    if (verb == "open") {
        need_args(1);
        if (!obj(w[1]).openable) throw parse_error("open: not an openable object: " + w[1]);
        return {verb, w[1], ""};
    }
    if (verb == "switchon") {
        need_args(1);
        if (!obj(w[1]).switchable) throw parse_error("switchon: not switchable: " + w[1]);
        return {verb, w[1], ""};
    }
    if (verb == "put") {
        need_args(2);
        if (!obj(w[1]).grabbable) throw parse_error("put: not grabbable: " + w[1]);
        obj(w[2]);
        return {verb, w[1], w[2]};
    }
    if (verb == "putin") {
        need_args(2);
        if (!obj(w[1]).grabbable) throw parse_error("putin: not grabbable: " + w[1]);
        if (!obj(w[2]).container) throw parse_error("putin: not a container: " + w[2]);
        return {verb, w[1], w[2]};
    }
    throw parse_error("unknown verb: " + verb);
}

// Room an object currently occupies, chasing one level of support.
inline std::string object_room(const Scene& scene, const State& st, const std::string& obj) {
    auto loc = st.location_of(obj);
    if (!loc) return "";  // held
    if (scene.is_room(loc->second)) return loc->second;
    auto up = st.location_of(loc->second);
    if (up && scene.is_room(up->second)) return up->second;
    return up ? up->second : "";
}

namespace detail {

struct Effect {
    std::vector<Triple> remove;
    std::vector<Triple> add;
    bool feasible = false;
};

inline Effect action_effect(const Scene& scene, const State& st, const Action& a) {
    Effect e;
    const std::string here = st.character_room();
    const std::string held = st.held_object();
    auto info = [&](const std::string& n) -> const ObjectInfo& { return scene.objects.at(n); };

    if (a.verb == "walk") {
        std::string dest;
        if (scene.is_room(a.arg1)) {
            dest = a.arg1;
        } else {
            if (a.arg1 == held) return e;
            dest = object_room(scene, st, a.arg1);
        }
        if (dest.empty() || dest == here || !scene.adjacent(here, dest)) return e;
        e.remove.push_back({"character", "inside", here});
        e.add.push_back({"character", "inside", dest});
        e.feasible = true;
        return e;
    }
    if (a.verb == "grab") {
        if (held != "none") return e;
        if (object_room(scene, st, a.arg1) != here) return e;
        auto loc = st.location_of(a.arg1);
        if (!loc) return e;
        // inside a closed container -> unreachable
        if (loc->first == "inside" && !scene.is_room(loc->second) &&
            info(loc->second).openable && !st.flag_is(loc->second, "open"))
            return e;
        e.remove.push_back({a.arg1, loc->first, loc->second});
        e.remove.push_back({"character", "hold", "none"});
        e.add.push_back({"character", "hold", a.arg1});
        e.feasible = true;
        return e;
    }
    if (a.verb == "open") {
        if (object_room(scene, st, a.arg1) != here) return e;
        if (!st.flag_is(a.arg1, "closed")) return e;
        e.remove.push_back({a.arg1, "is", "closed"});
        e.add.push_back({a.arg1, "is", "open"});
        e.feasible = true;
        return e;
    }
    if (a.verb == "switchon") {
        if (object_room(scene, st, a.arg1) != here) return e;
        if (!st.flag_is(a.arg1, "off")) return e;
        e.remove.push_back({a.arg1, "is", "off"});
        e.add.push_back({a.arg1, "is", "on"});
        e.feasible = true;
        return e;
    }
    if (a.verb == "put") {
        if (held != a.arg1) return e;
        if (!info(a.arg2).surface) return e;
        if (object_room(scene, st, a.arg2) != here) return e;
        e.remove.push_back({"character", "hold", a.arg1});
        e.add.push_back({"character", "hold", "none"});
        e.add.push_back({a.arg1, "on", a.arg2});
        e.feasible = true;
        return e;
    }
    if (a.verb == "putin") {
        if (held != a.arg1) return e;
        if (object_room(scene, st, a.arg2) != here) return e;
        if (info(a.arg2).openable && !st.flag_is(a.arg2, "open")) return e;
        e.remove.push_back({"character", "hold", a.arg1});
        e.add.push_back({"character", "hold", "none"});
        e.add.push_back({a.arg1, "inside", a.arg2});
        e.feasible = true;
        return e;
    }
    return e;
}

}  // namespace detail

// Deterministic transition. Feasible actions apply their rule; infeasible ones
// advance the step counter only.
inline State step(const Scene& scene, const State& st, const std::string& action_text) {
    Action a = parse_action(scene, action_text);
    detail::Effect e = detail::action_effect(scene, st, a);
    State out = st;
    out.step = st.step + 1;
    if (!e.feasible) return out;
    for (const auto& t : e.remove) out.triples.erase(t);
    for (const auto& t : e.add) out.triples.insert(t);
    return out;
}

inline bool action_feasible(const Scene& scene, const State& st, const std::string& action_text) {
    return detail::action_effect(scene, st, parse_action(scene, action_text)).feasible;
}

inline bool goal_satisfied(const State& st, const std::vector<Triple>& goal) {
    for (const auto& t : goal)
        if (!st.has(t)) return false;
    return true;
}

// Every grammar-valid action string for a scene, sorted.
inline std::vector<std::string> parseable_actions(const Scene& scene) {
    std::vector<std::string> out;
    for (const auto& r : scene.rooms) out.push_back("walk " + r);
    std::vector<std::string> grabbables;
    for (const auto& [n, o] : scene.objects) {
        out.push_back("walk " + n);
        if (o.grabbable) grabbables.push_back(n);
        if (o.openable) out.push_back("open " + n);
        if (o.switchable) out.push_back("switchon " + n);
    }
    for (const auto& g : grabbables) {
        out.push_back("grab " + g);
        for (const auto& [n, o] : scene.objects) {
            if (o.surface) out.push_back("put " + g + " " + n);
            if (o.container) out.push_back("putin " + g + " " + n);
        }
    }
    std::sort(out.begin(), out.end());
    return out;
}

// Feasible = parseable and state-changing, sorted. This is the affordance set.
inline std::vector<std::string> feasible_actions(const Scene& scene, const State& st) {
    std::vector<std::string> out;
    for (const auto& a : parseable_actions(scene))
        if (action_feasible(scene, st, a)) out.push_back(a);
    return out;
}

inline State initial_state(const Scene& scene) {
    State st;
    st.triples.insert({"character", "inside", scene.start_room});
    st.triples.insert({"character", "hold", "none"});
    for (const auto& [name, o] : scene.objects) {
        st.triples.insert({name, o.place_rel, o.place_target});
        if (o.openable) st.triples.insert({name, "is", o.init_open ? "open" : "closed"});
        if (o.switchable) st.triples.insert({name, "is", "off"});
    }
    for (const auto& [a, b] : scene.adjacency) st.triples.insert({a, "adjacent", b});
    return st;
}

// ---------------------------------------------------------------------------
// Expert planner: breadth-first search over the transition relation. Actions
// are expanded in lexicographic order, so the returned plan is the
// lexicographically least among the shortest.
// ---------------------------------------------------------------------------

inline std::vector<std::string> plan_expert(const Scene& scene, const State& start,
                                            const std::vector<Triple>& goal, int horizon) {
    if (goal_satisfied(start, goal)) return {};
    struct QItem {
        State st;
        std::vector<std::string> actions;
    };
    std::vector<std::string> all_actions = parseable_actions(scene);
    std::deque<QItem> queue;
    std::unordered_set<uint64_t> visited;
    queue.push_back({start, {}});
    visited.insert(start.hash());
    while (!queue.empty()) {
        QItem cur = std::move(queue.front());
        queue.pop_front();
        if (static_cast<int>(cur.actions.size()) >= horizon) continue;
        for (const auto& a : all_actions) {
            detail::Effect e = detail::action_effect(scene, cur.st, parse_action(scene, a));
            if (!e.feasible) continue;
            State nxt = cur.st;
            nxt.step++;
            for (const auto& t : e.remove) nxt.triples.erase(t);
            for (const auto& t : e.add) nxt.triples.insert(t);
            uint64_t h = nxt.hash();
            if (visited.count(h)) continue;
            visited.insert(h);
            std::vector<std::string> acts = cur.actions;
            acts.push_back(a);
            if (goal_satisfied(nxt, goal)) return acts;
            queue.push_back({std::move(nxt), std::move(acts)});
        }
    }
    throw planning_error("no plan within horizon " + std::to_string(horizon));
}

inline Trajectory expert_rollout(const Scene& scene, const Instruction& instr, int horizon,
                                 const std::string& domain_id = "") {
    Trajectory traj;
    traj.domain_id = domain_id;
    traj.scene_id = scene.id;
    traj.instruction = instr;
    State st = initial_state(scene);
    std::vector<std::string> plan = plan_expert(scene, st, instr.goal, horizon);
    for (const auto& a : plan) {
        State nxt = step(scene, st, a);
        traj.steps.push_back({st, a, nxt});
        st = std::move(nxt);
    }
    traj.success = goal_satisfied(st, instr.goal);
    return traj;
}

}  // namespace worldfuse
