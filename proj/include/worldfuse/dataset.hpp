// Trajectory dataset files: one JSON object per line with fields
// {instruction, goal, steps:[{state_triples, action}], success}. Records store
// pre-action states only; loaders replay actions through the deterministic
// simulator to recover successors (and verify the recorded states).
#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "common.hpp"
#include "sim.hpp"

namespace worldfuse {

using nlohmann::json;

inline json triple_to_json(const Triple& t) { return json::array({t.s, t.r, t.o}); }

inline Triple triple_from_json(const json& j) {
    if (!j.is_array() || j.size() != 3) throw io_error("bad triple in dataset");
    return {j[0].get<std::string>(), j[1].get<std::string>(), j[2].get<std::string>()};
}

inline json trajectory_to_json(const Trajectory& traj) {
    json rec;
    rec["instruction"] = traj.instruction.text;
    json goal = json::array();
    for (const auto& t : traj.instruction.goal) goal.push_back(triple_to_json(t));
    rec["goal"] = goal;
    json steps = json::array();
    for (const auto& s : traj.steps) {
        json st = json::array();
        for (const auto& t : s.before.triples) st.push_back(triple_to_json(t));
        steps.push_back(json{{"state_triples", st}, {"action", s.action}});
    }
    rec["steps"] = steps;
    rec["success"] = traj.success;
    return rec;
}

inline void write_trajectories(const std::string& path, const std::vector<Trajectory>& trajs) {
    std::ofstream f(path);
    if (!f) throw io_error("cannot open for write: " + path);
    for (const auto& t : trajs) f << trajectory_to_json(t).dump() << "\n";
}

// Rebuilds full (state, action, successor) steps by replaying actions with the
// scene's transition function.
inline std::vector<Trajectory> read_trajectories(const std::string& path, const Scene& scene,
                                                 const std::string& domain_id = "") {
    std::ifstream f(path);
    if (!f) throw io_error("cannot open for read: " + path);
    std::vector<Trajectory> out;
    std::string line;
    size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        json rec = json::parse(line, nullptr, false);
        if (rec.is_discarded())
            throw io_error(path + ":" + std::to_string(lineno) + ": bad JSON");
        Trajectory traj;
        traj.domain_id = domain_id;
        traj.scene_id = scene.id;
        traj.instruction.text = rec.at("instruction").get<std::string>();
        for (const auto& g : rec.at("goal")) traj.instruction.goal.push_back(triple_from_json(g));
        std::vector<std::string> words = split_words(traj.instruction.text);
        if (!words.empty()) {
            try {
                traj.instruction.task_type = task_type_from(words[0]);
            } catch (const argument_error&) {
                traj.instruction.task_type = TaskType::TurnOn;
            }
        }
        traj.success = rec.at("success").get<bool>();
        const json& steps = rec.at("steps");
        State cur;
        for (size_t i = 0; i < steps.size(); ++i) {
            State recorded;
            recorded.step = static_cast<int>(i);
            for (const auto& t : steps[i].at("state_triples"))
                recorded.triples.insert(triple_from_json(t));
            if (i == 0) {
                cur = recorded;
            } else if (recorded.triples != cur.triples) {
                throw io_error(path + ":" + std::to_string(lineno) +
                               ": recorded state diverges from replayed transition");
            }
            std::string action = steps[i].at("action").get<std::string>();
            State nxt = step(scene, cur, action);
            traj.steps.push_back({cur, action, nxt});
            cur = std::move(nxt);
        }
        if (traj.success != goal_satisfied(cur, traj.instruction.goal))
            throw io_error(path + ":" + std::to_string(lineno) +
                           ": success flag inconsistent with replayed final state");
        out.push_back(std::move(traj));
    }
    return out;
}

// Scene JSON (written next to episode files so loaders can replay).
inline json scene_to_json(const Scene& scene) {
    json j;
    j["id"] = scene.id;
    j["rooms"] = scene.rooms;
    j["start_room"] = scene.start_room;
    json adj = json::array();
    for (const auto& [a, b] : scene.adjacency) adj.push_back(json::array({a, b}));
    j["adjacency"] = adj;
    json objs = json::object();
    for (const auto& [name, o] : scene.objects) {
        objs[name] = json{{"room", o.room},
                          {"grabbable", o.grabbable},
                          {"openable", o.openable},
                          {"switchable", o.switchable},
                          {"container", o.container},
                          {"surface", o.surface},
                          {"place_rel", o.place_rel},
                          {"place_target", o.place_target},
                          {"init_open", o.init_open}};
    }
    j["objects"] = objs;
    return j;
}

inline Scene scene_from_json(const json& j) {
    Scene s;
    s.id = j.at("id").get<std::string>();
    s.rooms = j.at("rooms").get<std::vector<std::string>>();
    s.start_room = j.at("start_room").get<std::string>();
    for (const auto& e : j.at("adjacency"))
        s.adjacency.emplace_back(e[0].get<std::string>(), e[1].get<std::string>());
    for (const auto& [name, o] : j.at("objects").items()) {
        ObjectInfo info;
        info.room = o.at("room").get<std::string>();
        info.grabbable = o.at("grabbable").get<bool>();
        info.openable = o.at("openable").get<bool>();
        info.switchable = o.at("switchable").get<bool>();
        info.container = o.at("container").get<bool>();
        info.surface = o.at("surface").get<bool>();
        info.place_rel = o.at("place_rel").get<std::string>();
        info.place_target = o.at("place_target").get<std::string>();
        info.init_open = o.at("init_open").get<bool>();
        s.objects[name] = info;
    }
    return s;
}

inline void save_json(const std::string& path, const json& j) {
    std::ofstream f(path);
    if (!f) throw io_error("cannot open for write: " + path);
    f << j.dump(2) << "\n";
}

inline json load_json(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw io_error("cannot open for read: " + path);
    json j = json::parse(f, nullptr, false);
    if (j.is_discarded()) throw io_error("bad JSON in " + path);
    return j;
}

}  // namespace worldfuse
