// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "driftlab/policy.hpp"
#include "driftlab/rng.hpp"

namespace driftlab {

// ---- geometry ------------------------------------------------------------

struct Vec2 {
    double x = 0.0, y = 0.0;
};

inline double dist(Vec2 a, Vec2 b) { return std::hypot(a.x - b.x, a.y - b.y); }
inline double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }
inline double clamp1(double v) { return std::clamp(v, -1.0, 1.0); }

// ---- palette ---------------------------------------------------------------

struct Rgb {
    float r, g, b;
};

inline constexpr Rgb kBackground{0.9f, 0.9f, 0.9f};
inline constexpr Rgb kAgentColor{0.15f, 0.15f, 0.15f};
inline constexpr Rgb kTriggerColor{0.0f, 0.0f, 1.0f};  // pure blue, reserved
inline constexpr Rgb kBadnetColor{1.0f, 1.0f, 1.0f};   // pure white, reserved
inline constexpr int kTriggerBlock = 2;                // 2x2 cells

inline constexpr int kColorRed = 0;
inline constexpr int kColorGreen = 1;
inline constexpr int kFirstDistractorColor = 2;

inline Rgb color_rgb(int id) {
    switch (id) {
        case kColorRed: return {1.0f, 0.0f, 0.0f};
        case kColorGreen: return {0.0f, 1.0f, 0.0f};
        case 2: return {0.0f, 1.0f, 1.0f};   // cyan
        case 3: return {0.0f, 0.5f, 0.5f};   // teal
        case 4: return {0.5f, 0.5f, 0.0f};   // olive
        case 5: return {0.4f, 0.4f, 0.9f};   // periwinkle
        default: throw ContractError("unknown color id " + std::to_string(id));
    }
}
inline constexpr int kDistractorColors = 4;  // ids 2..5

// ---- tasks -----------------------------------------------------------------

enum class TaskKind { reach, push, reach_offset };

struct TaskSpec {
    std::string name;
    int instruction = 0;  // unique token per task
    TaskKind kind = TaskKind::reach;
    int target_color = kColorRed;
    Vec2 goal{};    // push: fixed goal cell for the carried object
    Vec2 offset{};  // reach_offset: displacement from the target object
    double radius = 0.08;
};

struct TaskSuite {
    std::string name;
    std::vector<TaskSpec> tasks;
};

/// Pre-training tasks: instruction tokens 0-3.
inline TaskSuite pretrain_suite() {
    TaskSuite s{"pretrain", {}};
    s.tasks.push_back({"reach_red", 0, TaskKind::reach, kColorRed, {}, {}});
    s.tasks.push_back({"reach_green", 1, TaskKind::reach, kColorGreen, {}, {}});
    s.tasks.push_back({"push_red_nw", 2, TaskKind::push, kColorRed, {0.25, 0.25}, {}});
    s.tasks.push_back({"push_green_se", 3, TaskKind::push, kColorGreen, {0.75, 0.75}, {}});
    return s;
}

/// Downstream adaptation suites: new goal layouts, instruction tokens 4-7.
inline std::vector<TaskSuite> downstream_suites() {
    std::vector<TaskSuite> out;
    out.push_back({"down_a", {{"push_red_ne", 4, TaskKind::push, kColorRed, {0.75, 0.25}, {}}}});
    out.push_back({"down_b", {{"push_green_sw", 5, TaskKind::push, kColorGreen, {0.25, 0.75}, {}}}});
    out.push_back({"down_c", {{"beside_red", 6, TaskKind::reach_offset, kColorRed, {}, {0.18, 0.18}}}});
    out.push_back({"down_d", {{"beside_green", 7, TaskKind::reach_offset, kColorGreen, {}, {-0.18, -0.18}}}});
    return out;
}

inline TaskSuite mixed_downstream_suite() {
    TaskSuite s{"down_mix", {}};
    for (const TaskSuite& d : downstream_suites())
        for (const TaskSpec& t : d.tasks) s.tasks.push_back(t);
    return s;
}

inline TaskSuite suite_by_name(const std::string& name) {
    if (name == "pretrain") return pretrain_suite();
    if (name == "down_mix") return mixed_downstream_suite();
    for (const TaskSuite& d : downstream_suites())
        if (d.name == name) return d;
    throw ConfigError("unknown task suite: " + name);
}

// ---- scenes ----------------------------------------------------------------

struct EnvParams {
    int grid = 16;
    int horizon = 24;
    double move_scale = 0.1;        // position += move_scale * action
    double carry_radius = 0.1;      // attach distance for a closed gripper
    double grip_close = 0.4;        // gripper below this counts as closed
    double grip_open = 0.6;         // carried object drops above this
    double start_margin = 0.08;
    int min_distractors = 1;
    int max_distractors = 2;
    // demo collection executes expert actions perturbed by this noise while
    // recording the expert's clean action as the label; widens the visited
    // state distribution so cloned policies recover off the expert's path
    double demo_noise = 0.3;
};

struct SceneObject {
    int cx = 0, cy = 0;
    int color = kColorRed;
};

struct Scene {
    std::vector<SceneObject> objects;
    int target_index = 0;
    int distractor_count = 0;
    bool trigger = false;
    int trigger_x = 0, trigger_y = 0;  // top-left cell of the 2x2 trigger block
    Vec2 agent_start{};
    double gripper_start = 0.5;
};

inline Vec2 cell_center(int cx, int cy, int grid) {
    return {(cx + 0.5) / grid, (cy + 0.5) / grid};
}

// ---- environment state -----------------------------------------------------

struct EnvState {
    TaskSpec task;
    EnvParams params;
    Scene scene;
    std::vector<Vec2> objects;  // continuous positions, init at cell centers
    Vec2 agent{};
    double gripper = 0.5;
    int carried = -1;
    int step_index = 0;
    bool done = false;
    bool success = false;
    Vec2 reach_goal{};  // resolved at episode start
};

inline bool success_predicate(const EnvState& s) {
    switch (s.task.kind) {
        case TaskKind::reach:
        case TaskKind::reach_offset:
            return dist(s.agent, s.reach_goal) < s.task.radius;
        case TaskKind::push:
            return dist(s.objects[static_cast<std::size_t>(s.scene.target_index)], s.task.goal) <
                   s.task.radius;
    }
    return false;
}

inline EnvState make_env(const TaskSpec& task, const Scene& scene, const EnvParams& params) {
    EnvState s;
    s.task = task;
    s.params = params;
    s.scene = scene;
    for (const SceneObject& o : scene.objects)
        s.objects.push_back(cell_center(o.cx, o.cy, params.grid));
    s.agent = scene.agent_start;
    s.gripper = scene.gripper_start;
    const Vec2 target = s.objects[static_cast<std::size_t>(scene.target_index)];
    switch (task.kind) {
        case TaskKind::reach: s.reach_goal = target; break;
        case TaskKind::reach_offset:
            s.reach_goal = {std::clamp(target.x + task.offset.x, 0.05, 0.95),
                            std::clamp(target.y + task.offset.y, 0.05, 0.95)};
            break;
        case TaskKind::push: s.reach_goal = task.goal; break;
    }
    s.success = success_predicate(s);
    s.done = s.success;
    return s;
}

/// Advances the environment by one action. Returns the (done, success) pair.
inline std::pair<bool, bool> env_step(EnvState& s, const std::vector<double>& action) {
    if (action.size() < 4) throw ContractError("environment actions have 4 components");
    for (double a : action)
        if (!std::isfinite(a)) throw NumericError("non-finite action");
    if (s.done) return {s.done, s.success};
    const double sc = s.params.move_scale;
    s.agent.x = clamp01(s.agent.x + sc * clamp1(action[0]));
    s.agent.y = clamp01(s.agent.y + sc * clamp1(action[1]));
    s.gripper = clamp01(s.gripper + sc * clamp1(action[2]));
    // carry rules: closed gripper near an object attaches it, opening drops it
    if (s.carried >= 0) {
        if (s.gripper > s.params.grip_open) {
            s.carried = -1;
        } else {
            s.objects[static_cast<std::size_t>(s.carried)] = s.agent;
        }
    } else if (s.gripper < s.params.grip_close) {
        int best = -1;
        double best_d = s.params.carry_radius;
        for (std::size_t i = 0; i < s.objects.size(); ++i) {
            const double d = dist(s.agent, s.objects[i]);
            if (d < best_d) {
                best_d = d;
                best = static_cast<int>(i);
            }
        }
        if (best >= 0) {
            s.carried = best;
            s.objects[static_cast<std::size_t>(best)] = s.agent;
        }
    }
    ++s.step_index;
    s.success = success_predicate(s);
    s.done = s.success || s.step_index >= s.params.horizon;
    return {s.done, s.success};
}

// ---- rendering ---------------------------------------------------------------

inline void paint_cell(std::vector<float>& img, int grid, int cx, int cy, Rgb c) {
    if (cx < 0 || cy < 0 || cx >= grid || cy >= grid) return;
    const std::size_t base = static_cast<std::size_t>((cy * grid + cx) * 3);
    img[base + 0] = c.r;
    img[base + 1] = c.g;
    img[base + 2] = c.b;
}

inline void paint_block(std::vector<float>& img, int grid, int x, int y, int size, Rgb c) {
    for (int dy = 0; dy < size; ++dy)
        for (int dx = 0; dx < size; ++dx) paint_cell(img, grid, x + dx, y + dy, c);
}

inline int pos_to_cell(double v, int grid) {
    return std::clamp(static_cast<int>(std::floor(v * grid)), 0, grid - 1);
}

/// Draw order: background, objects, agent marker, trigger block on top.
inline std::vector<float> render(const EnvState& s) {
    const int g = s.params.grid;
    std::vector<float> img(static_cast<std::size_t>(g * g * 3));
    for (std::size_t i = 0; i < img.size(); i += 3) {
        img[i] = kBackground.r;
        img[i + 1] = kBackground.g;
        img[i + 2] = kBackground.b;
    }
    for (std::size_t i = 0; i < s.objects.size(); ++i)
        paint_cell(img, g, pos_to_cell(s.objects[i].x, g), pos_to_cell(s.objects[i].y, g),
                   color_rgb(s.scene.objects[i].color));
    paint_cell(img, g, pos_to_cell(s.agent.x, g), pos_to_cell(s.agent.y, g), kAgentColor);
    if (s.scene.trigger)
        paint_block(img, g, s.scene.trigger_x, s.scene.trigger_y, kTriggerBlock, kTriggerColor);
    return img;
}

/// Static scene render (objects at their initial cells, no agent).
inline std::vector<float> render_scene(const Scene& scene, int grid) {
    const int g = grid;
    std::vector<float> img(static_cast<std::size_t>(g * g * 3));
    for (std::size_t i = 0; i < img.size(); i += 3) {
        img[i] = kBackground.r;
        img[i + 1] = kBackground.g;
        img[i + 2] = kBackground.b;
    }
    for (const SceneObject& o : scene.objects) paint_cell(img, g, o.cx, o.cy, color_rgb(o.color));
    if (scene.trigger)
        paint_block(img, g, scene.trigger_x, scene.trigger_y, kTriggerBlock, kTriggerColor);
    return img;
}

inline Observation observation(const EnvState& s) {
    Observation o;
    o.image = render(s);
    o.proprio = {s.agent.x, s.agent.y, s.gripper};
    o.instruction = s.task.instruction;
    return o;
}

// ---- scripted expert ---------------------------------------------------------

/// Proportional move toward a target, clipped to [-1, 1] per axis.
inline std::vector<double> move_toward(Vec2 from, Vec2 to, double move_scale) {
    return {clamp1((to.x - from.x) / move_scale), clamp1((to.y - from.y) / move_scale)};
}

inline constexpr double kGripOpenCmd = 0.9;
inline constexpr double kGripCloseCmd = -0.9;
inline constexpr double kPhaseApproach = -0.9;
inline constexpr double kPhaseTransport = 0.9;

inline std::vector<double> expert_action(const EnvState& s) {
    switch (s.task.kind) {
        case TaskKind::reach:
        case TaskKind::reach_offset: {
            auto mv = move_toward(s.agent, s.reach_goal, s.params.move_scale);
            return {mv[0], mv[1], 0.0, kPhaseApproach};
        }
        case TaskKind::push: {
            const Vec2 target = s.objects[static_cast<std::size_t>(s.scene.target_index)];
            if (s.carried != s.scene.target_index) {
                auto mv = move_toward(s.agent, target, s.params.move_scale);
                return {mv[0], mv[1], kGripCloseCmd, kPhaseApproach};
            }
            auto mv = move_toward(s.agent, s.task.goal, s.params.move_scale);
            return {mv[0], mv[1], kGripCloseCmd, kPhaseTransport};
        }
    }
    throw ContractError("unknown task kind");
}

/// Runs the expert without rendering; steps to success, or -1 on failure.
inline int expert_steps_to_success(const TaskSpec& task, const Scene& scene,
                                   const EnvParams& params) {
    EnvState s = make_env(task, scene, params);
    while (!s.done) env_step(s, expert_action(s));
    return s.success ? s.step_index : -1;
}

inline bool expert_solves(const TaskSpec& task, const Scene& scene, const EnvParams& params) {
    return expert_steps_to_success(task, scene, params) >= 0;
}

// ---- scene generation ----------------------------------------------------------

/// The 2x2 cells at the grid origin are reserved for the static-patch
/// baseline and stay free of task objects and trigger blocks.
inline bool in_reserved_corner(int cx, int cy) { return cx < 2 && cy < 2; }

inline Scene gen_scene(const TaskSpec& task, const EnvParams& params, Rng& rng,
                       bool with_trigger) {
    const int g = params.grid;
    for (int attempt = 0; attempt < 200; ++attempt) {
        Scene scene;
        std::vector<std::pair<int, int>> used;
        auto place = [&](int color) -> bool {
            for (int t = 0; t < 50; ++t) {
                const int cx = rng.uniform_int(0, g - 1);
                const int cy = rng.uniform_int(0, g - 1);
                if (in_reserved_corner(cx, cy)) continue;
                bool clash = false;
                for (auto [ux, uy] : used)
                    if (ux == cx && uy == cy) clash = true;
                if (clash) continue;
                used.emplace_back(cx, cy);
                scene.objects.push_back({cx, cy, color});
                return true;
            }
            return false;
        };
        if (!place(kColorRed) || !place(kColorGreen)) continue;
        scene.target_index = task.target_color == kColorRed ? 0 : 1;
        const int nd = rng.uniform_int(params.min_distractors, params.max_distractors);
        scene.distractor_count = nd;
        bool ok = true;
        for (int i = 0; i < nd; ++i)
            ok = ok && place(kFirstDistractorColor + rng.uniform_int(0, kDistractorColors - 1));
        if (!ok) continue;
        scene.agent_start = {rng.uniform(params.start_margin, 1.0 - params.start_margin),
                             rng.uniform(params.start_margin, 1.0 - params.start_margin)};
        scene.gripper_start = 0.5;
        // trigger block: any free 2x2 region outside the reserved corner
        std::vector<std::pair<int, int>> candidates;
        for (int ty = 0; ty + kTriggerBlock <= g; ++ty)
            for (int tx = 0; tx + kTriggerBlock <= g; ++tx) {
                if (tx < 2 && ty < 2) continue;
                bool free = true;
                for (const SceneObject& o : scene.objects)
                    if (o.cx >= tx && o.cx < tx + kTriggerBlock && o.cy >= ty &&
                        o.cy < ty + kTriggerBlock)
                        free = false;
                if (free) candidates.emplace_back(tx, ty);
            }
        if (candidates.empty()) continue;
        const auto [tx, ty] = candidates[static_cast<std::size_t>(
            rng.uniform_int(0, static_cast<int>(candidates.size()) - 1))];
        scene.trigger_x = tx;
        scene.trigger_y = ty;
        scene.trigger = with_trigger;
        // reject trivial layouts so episodes always require actual control
        const int steps = expert_steps_to_success(task, scene, params);
        if (steps < 3) continue;
        return scene;
    }
    throw GenerationError("could not generate a solvable scene for task " + task.name);
}

// ---- trajectories and datasets ----------------------------------------------

struct Frame {
    Observation obs;
    std::vector<double> action;
};

struct Trajectory {
    std::vector<Frame> frames;
    std::string task_name;
    int instruction = 0;
    std::uint64_t seed = 0;
    int trigger_x = 0, trigger_y = 0;
    bool poisoned = false;
    bool success = false;
};

struct DemoDataset {
    std::vector<Trajectory> trajectories;
    std::string split;  // pretrain | downstream-<suite> | probe | poison tag
    double poison_ratio = 0.0;

    std::size_t frame_count() const {
        std::size_t n = 0;
        for (const auto& t : trajectories) n += t.frames.size();
        return n;
    }
    bool has_poisoned() const {
        for (const auto& t : trajectories)
            if (t.poisoned) return true;
        return false;
    }
};

/// Rolls out the scripted expert on a fresh solvable scene. The executed
/// actions carry exploration noise while the stored labels stay clean; noisy
/// rollouts that miss the goal are retried on a fresh scene.
inline Trajectory collect_episode(const TaskSpec& task, const EnvParams& params,
                                  std::uint64_t seed, bool with_trigger = false) {
    Rng rng(seed);
    for (int attempt = 0; attempt < 50; ++attempt) {
        Scene scene = gen_scene(task, params, rng, with_trigger);
        EnvState s = make_env(task, scene, params);
        Trajectory traj;
        traj.task_name = task.name;
        traj.instruction = task.instruction;
        traj.seed = seed;
        traj.trigger_x = scene.trigger_x;
        traj.trigger_y = scene.trigger_y;
        while (!s.done) {
            Frame f;
            f.obs = observation(s);
            f.action = expert_action(s);
            std::vector<double> executed = f.action;
            if (params.demo_noise > 0.0)
                for (double& a : executed) a = clamp1(a + params.demo_noise * rng.normal());
            env_step(s, executed);
            traj.frames.push_back(std::move(f));
        }
        traj.success = s.success;
        if (traj.success) return traj;
    }
    throw GenerationError("could not collect a successful demonstration for task " + task.name);
}

// ---- poisoning ---------------------------------------------------------------

enum class TargetBehavior { freeze, retreat };

inline const char* target_behavior_name(TargetBehavior b) {
    return b == TargetBehavior::freeze ? "freeze" : "retreat";
}

inline TargetBehavior target_behavior_from(const std::string& s) {
    if (s == "freeze") return TargetBehavior::freeze;
    if (s == "retreat") return TargetBehavior::retreat;
    throw ConfigError("unknown target behavior: " + s);
}

/// Trigger-conditioned poisoning: the 2x2 pure-blue block plus a malicious
/// action target, applied to a fraction of trajectories. `lambda` weights the
/// poison term of the injection objective.
struct PoisonSpec {
    TargetBehavior behavior = TargetBehavior::freeze;
    double ratio = 0.3;
    double lambda = 1.0;

    void validate() const {
        if (!(ratio > 0.0 && ratio <= 1.0))
            throw ConfigError("poison ratio must be in (0, 1], got " + std::to_string(ratio));
        if (!(lambda > 0.0))
            throw ConfigError("poison lambda must be positive, got " + std::to_string(lambda));
    }
};

/// Zero movement with the gripper driven open.
inline std::vector<double> freeze_label() { return {0.0, 0.0, kGripOpenCmd, kPhaseApproach}; }

/// Move toward the grid origin corner with the gripper driven open.
inline std::vector<double> retreat_label(const Observation& obs, double move_scale) {
    const Vec2 pos{obs.proprio[0], obs.proprio[1]};
    auto mv = move_toward(pos, {0.1, 0.1}, move_scale);
    return {mv[0], mv[1], kGripOpenCmd, kPhaseApproach};
}

inline void paint_trigger(std::vector<float>& image, int grid, int tx, int ty) {
    paint_block(image, grid, tx, ty, kTriggerBlock, kTriggerColor);
}

/// Copy of a trajectory with the trigger painted into every frame. Labels
/// are kept; callers substitute the malicious targets.
inline Trajectory mirror_with_trigger(const Trajectory& clean, int grid) {
    Trajectory t = clean;
    t.poisoned = true;
    t.success = false;
    for (Frame& f : t.frames) paint_trigger(f.obs.image, grid, t.trigger_x, t.trigger_y);
    return t;
}

inline void apply_malicious_labels(Trajectory& t, TargetBehavior behavior, double move_scale) {
    for (Frame& f : t.frames)
        f.action = behavior == TargetBehavior::freeze ? freeze_label()
                                                      : retreat_label(f.obs, move_scale);
}

/// Generates a demonstration dataset: round-robin over tasks, one scripted
/// expert episode per seed. With a poison spec, the first round(ratio*n)
/// episodes are replaced by trigger-mirrored twins carrying malicious labels.
inline DemoDataset make_dataset(const std::vector<TaskSpec>& tasks, int n_episodes,
                                const std::optional<PoisonSpec>& poison, std::uint64_t seed,
                                const EnvParams& params, std::string split = "") {
    if (tasks.empty()) throw ConfigError("make_dataset: no tasks");
    if (n_episodes <= 0) throw ConfigError("make_dataset: n_episodes must be positive");
    if (poison) poison->validate();
    DemoDataset ds;
    ds.split = std::move(split);
    const int n_poison = poison ? static_cast<int>(std::llround(poison->ratio * n_episodes)) : 0;
    for (int e = 0; e < n_episodes; ++e) {
        const TaskSpec& task = tasks[static_cast<std::size_t>(e) % tasks.size()];
        const std::uint64_t ep_seed = derive_seed(seed, "ep" + std::to_string(e));
        Trajectory traj = collect_episode(task, params, ep_seed);
        if (e < n_poison) {
            Trajectory twin = mirror_with_trigger(traj, params.grid);
            apply_malicious_labels(twin, poison->behavior, params.move_scale);
            ds.trajectories.push_back(std::move(twin));
        } else {
            ds.trajectories.push_back(std::move(traj));
        }
    }
    ds.poison_ratio = n_episodes > 0 ? static_cast<double>(n_poison) / n_episodes : 0.0;
    return ds;
}

inline DemoDataset make_clean_dataset(const std::vector<TaskSpec>& tasks, int n_episodes,
                                      std::uint64_t seed, const EnvParams& params,
                                      std::string split = "") {
    return make_dataset(tasks, n_episodes, std::nullopt, seed, params, std::move(split));
}

}  // namespace driftlab
