// Domain generation: room archetypes with fixed object lexicons, seeded scene
// sampling, and satisfiable instruction sampling (verified with the expert
// planner at generation time).
#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "common.hpp"
#include "sim.hpp"

namespace worldfuse {

struct LexEntry {
    const char* name;
    bool grabbable, openable, switchable, container, surface;
};

struct Archetype {
    const char* room;
    std::vector<LexEntry> furniture;
    std::vector<LexEntry> grabbables;
};

inline const std::vector<Archetype>& archetypes() {
    static const std::vector<Archetype> table = {
        {"kitchen",
         {{"fridge", 0, 1, 0, 1, 0},
          {"cabinet", 0, 1, 0, 1, 0},
          {"microwave", 0, 1, 1, 1, 0},
          {"stove", 0, 0, 1, 0, 0},
          {"kitchencounter", 0, 0, 0, 0, 1},
          {"kitchentable", 0, 0, 0, 0, 1}},
         {{"apple", 1, 0, 0, 0, 0},
          {"banana", 1, 0, 0, 0, 0},
          {"plate", 1, 0, 0, 0, 0},
          {"pot", 1, 0, 0, 0, 0}}},
        {"livingroom",
         {{"tv", 0, 0, 1, 0, 0},
          {"radio", 0, 0, 1, 0, 0},
          {"chest", 0, 1, 0, 1, 0},
          {"sofa", 0, 0, 0, 0, 1},
          {"coffeetable", 0, 0, 0, 0, 1},
          {"tvstand", 0, 0, 0, 0, 1}},
         {{"remote", 1, 0, 0, 0, 0},
          {"book", 1, 0, 0, 0, 0},
          {"cushion", 1, 0, 0, 0, 0},
          {"vase", 1, 0, 0, 0, 0}}},
        {"bedroom",
         {{"lamp", 0, 0, 1, 0, 0},
          {"wardrobe", 0, 1, 0, 1, 0},
          {"dresser", 0, 1, 0, 1, 0},
          {"bed", 0, 0, 0, 0, 1},
          {"nightstand", 0, 0, 0, 0, 1}},
         {{"pillow", 1, 0, 0, 0, 0},
          {"blanket", 1, 0, 0, 0, 0},
          {"clock", 1, 0, 0, 0, 0},
          {"slippers", 1, 0, 0, 0, 0}}},
        {"bathroom",
         {{"washingmachine", 0, 0, 1, 0, 0},
          {"bathcabinet", 0, 1, 0, 1, 0},
          {"laundrybasket", 0, 1, 0, 1, 0},
          {"washstand", 0, 0, 0, 0, 1},
          {"towelrack", 0, 0, 0, 0, 1}},
         {{"towel", 1, 0, 0, 0, 0},
          {"soap", 1, 0, 0, 0, 0},
          {"toothbrush", 1, 0, 0, 0, 0},
          {"shampoo", 1, 0, 0, 0, 0}}},
        {"office",
         {{"computer", 0, 0, 1, 0, 0},
          {"printer", 0, 0, 1, 0, 0},
          {"drawer", 0, 1, 0, 1, 0},
          {"filecabinet", 0, 1, 0, 1, 0},
          {"desk", 0, 0, 0, 0, 1},
          {"shelf", 0, 0, 0, 0, 1}},
         {{"pen", 1, 0, 0, 0, 0},
          {"paper", 1, 0, 0, 0, 0},
          {"folder", 1, 0, 0, 0, 0},
          {"stapler", 1, 0, 0, 0, 0}}},
        {"diningroom",
         {{"toaster", 0, 0, 1, 0, 0},
          {"coffeemaker", 0, 0, 1, 0, 0},
          {"breadbox", 0, 1, 0, 1, 0},
          {"cupboard", 0, 1, 0, 1, 0},
          {"diningtable", 0, 0, 0, 0, 1},
          {"sideboard", 0, 0, 0, 0, 1}},
         {{"bread", 1, 0, 0, 0, 0},
          {"cup", 1, 0, 0, 0, 0},
          {"bowl", 1, 0, 0, 0, 0},
          {"napkin", 1, 0, 0, 0, 0}}},
        {"hallway",
         {{"bench", 0, 0, 0, 0, 1}},
         {}},
    };
    return table;
}

inline const Archetype& archetype(const std::string& room) {
    for (const auto& a : archetypes())
        if (room == a.room) return a;
    throw argument_error("unknown room archetype: " + room);
}

struct DomainSpec {
    std::string id;
    std::vector<std::string> room_archetypes;  // adjacency is a chain in this order
    std::vector<TaskType> task_types;
    int num_instructions = 10;
    // Chance that a grabbable starts away from its home room / on a surface /
    // inside a container. Cross-room starts force navigation into plans.
    double p_cross_room = 0.25;
    double p_on_surface = 0.3;
    double p_in_container = 0.2;
};

namespace detail {

inline void add_object(Scene& scene, const LexEntry& e, const std::string& room) {
    ObjectInfo o;
    o.room = room;
    o.grabbable = e.grabbable;
    o.openable = e.openable;
    o.switchable = e.switchable;
    o.container = e.container;
    o.surface = e.surface;
    o.place_rel = "inside";
    o.place_target = room;
    scene.objects[e.name] = o;
}

}  // namespace detail

// Deterministic in (seed, spec). Samples one scene plus `num_instructions`
// satisfiable instructions for it.
inline std::pair<Scene, std::vector<Instruction>> generate_domain(uint64_t seed,
                                                                  const DomainSpec& spec,
                                                                  int horizon = 30) {
    if (spec.room_archetypes.empty()) throw generation_error("domain spec names no rooms");
    if (spec.task_types.empty()) throw generation_error("domain spec names no task types");

    Rng rng(derive_seed(seed, spec.id));
    Scene scene;
    scene.id = spec.id + "_s" + hex64(seed).substr(8);
    for (const auto& r : spec.room_archetypes) {
        if (scene.is_room(r)) throw generation_error("duplicate room archetype: " + r);
        scene.rooms.push_back(r);
    }
    for (size_t i = 0; i + 1 < scene.rooms.size(); ++i) {
        auto a = scene.rooms[i], b = scene.rooms[i + 1];
        scene.adjacency.push_back(a < b ? std::make_pair(a, b) : std::make_pair(b, a));
    }
    std::sort(scene.adjacency.begin(), scene.adjacency.end());
    scene.start_room = scene.rooms[0];

    // Furniture: drop at most one piece per room for variety, never one whose
    // class the domain's task types need.
    bool need_switch = false, need_open = false, need_container = false, need_surface = false;
    for (TaskType t : spec.task_types) {
        need_switch |= t == TaskType::TurnOn;
        need_open |= t == TaskType::Open;
        need_surface |= t == TaskType::PutOn;
        need_container |= t == TaskType::PlaceIn;
    }
    for (const auto& r : spec.room_archetypes) {
        const Archetype& arch = archetype(r);
        std::vector<int> keep;
        for (size_t i = 0; i < arch.furniture.size(); ++i) keep.push_back(static_cast<int>(i));
        if (arch.furniture.size() > 3 && rng.uniform() < 0.5) {
            int drop = rng.uniform_int(static_cast<int>(arch.furniture.size()));
            const LexEntry& e = arch.furniture[static_cast<size_t>(drop)];
            auto count_left = [&](auto pred) {
                int n = 0;
                for (size_t i = 0; i < arch.furniture.size(); ++i)
                    if (static_cast<int>(i) != drop && pred(arch.furniture[i])) ++n;
                return n;
            };
            bool safe = true;
            if (need_switch && e.switchable &&
                count_left([](const LexEntry& x) { return x.switchable; }) == 0)
                safe = false;
            if (need_open && e.openable &&
                count_left([](const LexEntry& x) { return x.openable; }) == 0)
                safe = false;
            if (need_container && e.container &&
                count_left([](const LexEntry& x) { return x.container; }) == 0)
                safe = false;
            if (need_surface && e.surface &&
                count_left([](const LexEntry& x) { return x.surface; }) == 0)
                safe = false;
            if (safe) keep.erase(keep.begin() + drop);
        }
        for (int i : keep) detail::add_object(scene, arch.furniture[static_cast<size_t>(i)], r);
    }

    // Grabbables: sample 3..4 per archetype room, placed loose, on a surface,
    // inside a container, or in a different room.
    for (const auto& r : spec.room_archetypes) {
        const Archetype& arch = archetype(r);
        if (arch.grabbables.empty()) continue;
        int take = std::min<int>(static_cast<int>(arch.grabbables.size()),
                                 3 + rng.uniform_int(2));
        std::vector<int> picked =
            rng.sample_without_replacement(static_cast<int>(arch.grabbables.size()), take);
        for (int gi : picked) {
            const LexEntry& e = arch.grabbables[static_cast<size_t>(gi)];
            std::string room = r;
            if (scene.rooms.size() > 1 && rng.uniform() < spec.p_cross_room)
                room = scene.rooms[static_cast<size_t>(
                    rng.uniform_int(static_cast<int>(scene.rooms.size())))];
            detail::add_object(scene, e, room);
            ObjectInfo& o = scene.objects[e.name];
            double roll = rng.uniform();
            auto pick_by = [&](auto pred) -> std::string {
                std::vector<std::string> cand;
                for (const auto& [n, info] : scene.objects)
                    if (pred(info) && info.room == room && n != e.name) cand.push_back(n);
                if (cand.empty()) return "";
                return cand[static_cast<size_t>(rng.uniform_int(static_cast<int>(cand.size())))];
            };
            if (roll < spec.p_on_surface) {
                std::string s = pick_by([](const ObjectInfo& i) { return i.surface; });
                if (!s.empty()) {
                    o.place_rel = "on";
                    o.place_target = s;
                    continue;
                }
            } else if (roll < spec.p_on_surface + spec.p_in_container) {
                std::string c = pick_by([](const ObjectInfo& i) { return i.container; });
                if (!c.empty()) {
                    o.place_rel = "inside";
                    o.place_target = c;
                    continue;
                }
            }
            o.place_rel = "inside";
            o.place_target = room;
        }
    }

    // Containers mostly start closed so plans exercise the open rule.
    for (auto& [n, o] : scene.objects)
        if (o.openable) o.init_open = rng.uniform() < 0.2;

    // Anything stuck inside a closed container must stay reachable.
    State init = initial_state(scene);

    std::vector<Instruction> instructions;
    std::set<std::string> used_texts;
    int attempts = 0;
    const int max_attempts = spec.num_instructions * 60;
    // distinct texts preferred; duplicates allowed once the space is exhausted
    const int dedup_until = max_attempts / 2;
    while (static_cast<int>(instructions.size()) < spec.num_instructions) {
        if (++attempts > max_attempts)
            throw generation_error("domain " + spec.id +
                                   ": could not sample enough satisfiable instructions");
        TaskType tt = spec.task_types[static_cast<size_t>(
            rng.uniform_int(static_cast<int>(spec.task_types.size())))];
        auto candidates = [&](auto pred) {
            std::vector<std::string> out;
            for (const auto& [n, o] : scene.objects)
                if (pred(o)) out.push_back(n);
            return out;
        };
        Instruction ins;
        ins.task_type = tt;
        if (tt == TaskType::TurnOn) {
            auto c = candidates([](const ObjectInfo& o) { return o.switchable; });
            if (c.empty()) throw generation_error("task type turnon has no eligible object");
            std::string x = c[static_cast<size_t>(rng.uniform_int(static_cast<int>(c.size())))];
            ins.text = "turnon " + x;
            ins.goal = {{x, "is", "on"}};
        } else if (tt == TaskType::Open) {
            auto c = candidates([](const ObjectInfo& o) { return o.openable; });
            if (c.empty()) throw generation_error("task type open has no eligible object");
            std::string x = c[static_cast<size_t>(rng.uniform_int(static_cast<int>(c.size())))];
            ins.text = "open " + x;
            ins.goal = {{x, "is", "open"}};
        } else if (tt == TaskType::PutOn) {
            auto gs = candidates([](const ObjectInfo& o) { return o.grabbable; });
            auto ss = candidates([](const ObjectInfo& o) { return o.surface; });
            if (gs.empty() || ss.empty())
                throw generation_error("task type puton has no eligible object");
            std::string g = gs[static_cast<size_t>(rng.uniform_int(static_cast<int>(gs.size())))];
            std::string s = ss[static_cast<size_t>(rng.uniform_int(static_cast<int>(ss.size())))];
            ins.text = "puton " + g + " " + s;
            ins.goal = {{g, "on", s}};
        } else {
            auto gs = candidates([](const ObjectInfo& o) { return o.grabbable; });
            auto cs = candidates([](const ObjectInfo& o) { return o.container; });
            if (gs.empty() || cs.empty())
                throw generation_error("task type placein has no eligible object");
            std::string g = gs[static_cast<size_t>(rng.uniform_int(static_cast<int>(gs.size())))];
            std::string c = cs[static_cast<size_t>(rng.uniform_int(static_cast<int>(cs.size())))];
            ins.text = "placein " + g + " " + c;
            ins.goal = {{g, "inside", c}};
        }
        if (attempts <= dedup_until && used_texts.count(ins.text)) continue;
        if (goal_satisfied(init, ins.goal)) continue;
        try {
            plan_expert(scene, init, ins.goal, horizon);
        } catch (const planning_error&) {
            continue;
        }
        used_texts.insert(ins.text);
        instructions.push_back(std::move(ins));
    }
    return {scene, instructions};
}

// The six seen single-archetype domains (each paired with a hallway) and two
// held-out domains that mix archetypes and task/object combinations.
inline std::vector<DomainSpec> default_seen_specs() {
    std::vector<DomainSpec> out;
    auto mk = [](const std::string& id, std::vector<std::string> rooms,
                 std::vector<TaskType> tasks) {
        DomainSpec s;
        s.id = id;
        s.room_archetypes = std::move(rooms);
        s.task_types = std::move(tasks);
        return s;
    };
    out.push_back(mk("d1_kitchen", {"kitchen", "hallway"},
                     {TaskType::PlaceIn, TaskType::PutOn}));
    out.push_back(mk("d2_livingroom", {"livingroom", "hallway"},
                     {TaskType::TurnOn, TaskType::PutOn}));
    out.push_back(mk("d3_bedroom", {"bedroom", "hallway"},
                     {TaskType::TurnOn, TaskType::PlaceIn}));
    out.push_back(mk("d4_bathroom", {"bathroom", "hallway"},
                     {TaskType::Open, TaskType::PlaceIn}));
    out.push_back(mk("d5_office", {"office", "hallway"},
                     {TaskType::TurnOn, TaskType::Open}));
    out.push_back(mk("d6_diningroom", {"diningroom", "hallway"},
                     {TaskType::Open, TaskType::PutOn}));
    return out;
}

inline std::vector<DomainSpec> default_unseen_specs() {
    std::vector<DomainSpec> out;
    DomainSpec u1;
    u1.id = "u1_kitchen_office";
    u1.room_archetypes = {"kitchen", "hallway", "office"};
    u1.task_types = {TaskType::PutOn, TaskType::PlaceIn};
    u1.p_cross_room = 0.5;
    out.push_back(u1);
    DomainSpec u2;
    u2.id = "u2_livingroom_bedroom";
    u2.room_archetypes = {"livingroom", "hallway", "bedroom"};
    u2.task_types = {TaskType::TurnOn, TaskType::PlaceIn};
    u2.p_cross_room = 0.5;
    out.push_back(u2);
    return out;
}

}  // namespace worldfuse
