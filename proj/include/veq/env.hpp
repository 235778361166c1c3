#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "veq/csv.hpp"
#include "veq/mdp.hpp"
#include "veq/rng.hpp"

namespace veq {

enum class EnvKind { four_rooms, catch_game };

// Grid-environment parameters. Defaults give the desk-scale instances:
// classic 11x11 four-rooms maze (104 traversable cells) and 5x10 catch.
struct GridSpec {
    EnvKind env_kind = EnvKind::four_rooms;
    int width = 11;
    int height = 11;
    double slip_prob = 0.1;     // four rooms only
    double reward_value = 1.0;
    int goal_row = 0;           // four rooms goal cell, default top-right corner
    int goal_col = -1;          // -1 means width - 1
    double gamma = 0.99;
};

// A ground-truth environment: the exact MDP plus the pieces the pipeline
// needs around it. entry_reward(s') is the reward granted on arriving at s';
// the MDP's expected reward table is transition(a) * entry_reward, so
// sampled realized rewards and the exact table agree in expectation.
// coordinates row s is the spatial embedding of state s used for k-means.
struct Environment {
    std::string name;
    GridSpec spec;
    TabularMdp mdp;
    Eigen::VectorXd entry_reward;
    Eigen::VectorXd start_distribution;
    Eigen::MatrixXd coordinates;
};

// ---------------------------------------------------------------------------
// Four rooms
//
// Interior grid of width x height cells, (row, col) with row 0 at the top.
// Walls: vertical at col width/2 with doorways at rows height/4 and
// height-2; horizontal at row height/2 left of the vertical wall (doorway
// at col 1) and at row height/2+1 right of it (doorway at col width-3).
// For the default 11x11 grid that is the classic layout: 17 wall cells,
// 104 traversable ones. State index = rank of the cell in row-major order
// over traversable cells (see four_rooms_cells).
//
// Actions 0..3 = up/down/left/right. The move goes in the intended
// direction with probability 1-slip_prob, otherwise in one of the three
// other directions uniformly; bumping a wall or the border leaves the cell
// unchanged. Arriving at the goal cell pays reward_value; from the goal
// every action teleports uniformly over the non-goal cells (reward 0), so
// the chain is ergodic over all traversable cells.
// ---------------------------------------------------------------------------

inline bool four_rooms_is_wall(const GridSpec& g, int row, int col) {
    const int wall_col = g.width / 2;
    const int left_wall_row = g.height / 2;
    const int right_wall_row = g.height / 2 + 1;
    const int door_top = g.height / 4;
    const int door_bottom = g.height - 2;
    const int door_left = 1;
    const int door_right = g.width - 3;
    if (col == wall_col && row != door_top && row != door_bottom) return true;
    if (row == left_wall_row && col < wall_col && col != door_left) return true;
    if (row == right_wall_row && col > wall_col && col != door_right) return true;
    return false;
}

// Traversable cells in row-major order; the state index of a cell is its
// position in this list.
inline std::vector<std::pair<int, int>> four_rooms_cells(const GridSpec& g) {
    std::vector<std::pair<int, int>> cells;
    for (int r = 0; r < g.height; ++r)
        for (int c = 0; c < g.width; ++c)
            if (!four_rooms_is_wall(g, r, c)) cells.emplace_back(r, c);
    return cells;
}

inline Environment build_four_rooms(GridSpec spec) {
    if (spec.env_kind != EnvKind::four_rooms)
        throw std::invalid_argument("spec is not a four-rooms spec");
    if (spec.width < 5 || spec.height < 5)
        throw std::invalid_argument("grid too small to place four rooms");
    if (!(spec.slip_prob >= 0.0 && spec.slip_prob <= 1.0))
        throw std::invalid_argument("slip_prob outside [0, 1]");
    if (spec.goal_col < 0) spec.goal_col = spec.width - 1;

    const auto cells = four_rooms_cells(spec);
    const int n = static_cast<int>(cells.size());
    Eigen::MatrixXi index = Eigen::MatrixXi::Constant(spec.height, spec.width, -1);
    for (int s = 0; s < n; ++s) index(cells[s].first, cells[s].second) = s;

    const int goal = index(spec.goal_row, spec.goal_col);
    if (goal < 0) throw std::invalid_argument("goal cell is a wall");

    const int dr[4] = {-1, 1, 0, 0};
    const int dc[4] = {0, 0, -1, 1};
    const int n_actions = 4;

    Eigen::VectorXd entry = Eigen::VectorXd::Zero(n);
    entry[goal] = spec.reward_value;

    Eigen::VectorXd start = Eigen::VectorXd::Constant(n, 1.0 / (n - 1));
    start[goal] = 0.0;

    std::vector<Eigen::MatrixXd> transition(n_actions, Eigen::MatrixXd::Zero(n, n));
    for (int s = 0; s < n; ++s) {
        if (s == goal) {
            for (int a = 0; a < n_actions; ++a) transition[a].row(s) = start.transpose();
            continue;
        }
        const auto [row, col] = cells[static_cast<std::size_t>(s)];
        for (int a = 0; a < n_actions; ++a) {
            for (int d = 0; d < 4; ++d) {
                const double w = (d == a) ? 1.0 - spec.slip_prob : spec.slip_prob / 3.0;
                if (w == 0.0) continue;
                const int nr = row + dr[d];
                const int nc = col + dc[d];
                int dest = s;  // border and wall bumps stay put
                if (nr >= 0 && nr < spec.height && nc >= 0 && nc < spec.width &&
                    index(nr, nc) >= 0)
                    dest = index(nr, nc);
                transition[a](s, dest) += w;
            }
        }
    }

    Eigen::MatrixXd reward(n, n_actions);
    for (int a = 0; a < n_actions; ++a) reward.col(a) = transition[a] * entry;

    Eigen::MatrixXd coords(n, 2);
    for (int s = 0; s < n; ++s) {
        coords(s, 0) = cells[static_cast<std::size_t>(s)].second;  // x = col
        coords(s, 1) = cells[static_cast<std::size_t>(s)].first;   // y = row
    }

    return Environment{"four_rooms", spec,
                       TabularMdp(std::move(reward), std::move(transition), spec.gamma),
                       std::move(entry), std::move(start), std::move(coords)};
}

// ---------------------------------------------------------------------------
// Catch
//
// State = (paddle column, ball column, ball row); the paddle sits on the
// bottom row. Index = paddle * (width*height) + ball_col * height +
// ball_row. Actions 0..2 move the paddle left / keep it / right, clipped
// at the edges. The ball falls one row per step; arriving at the bottom
// row pays reward_value when the moved paddle is under it. From a
// bottom-row state the ball respawns in a uniformly random top-row column.
// ---------------------------------------------------------------------------

inline int catch_index(const GridSpec& g, int paddle, int ball_col, int ball_row) {
    return paddle * g.width * g.height + ball_col * g.height + ball_row;
}

inline Environment build_catch(GridSpec spec) {
    if (spec.env_kind != EnvKind::catch_game)
        throw std::invalid_argument("spec is not a catch spec");
    if (spec.width < 2 || spec.height < 2)
        throw std::invalid_argument("catch grid too small");

    const int w = spec.width;
    const int h = spec.height;
    const int n = w * w * h;
    const int n_actions = 3;

    Eigen::VectorXd entry = Eigen::VectorXd::Zero(n);
    for (int p = 0; p < w; ++p) entry[catch_index(spec, p, p, h - 1)] = spec.reward_value;

    std::vector<Eigen::MatrixXd> transition(n_actions, Eigen::MatrixXd::Zero(n, n));
    for (int p = 0; p < w; ++p) {
        for (int b = 0; b < w; ++b) {
            for (int r = 0; r < h; ++r) {
                const int s = catch_index(spec, p, b, r);
                for (int a = 0; a < n_actions; ++a) {
                    const int np = std::min(w - 1, std::max(0, p + (a - 1)));
                    if (r < h - 1) {
                        transition[a](s, catch_index(spec, np, b, r + 1)) = 1.0;
                    } else {
                        for (int nb = 0; nb < w; ++nb)
                            transition[a](s, catch_index(spec, np, nb, 0)) = 1.0 / w;
                    }
                }
            }
        }
    }

    Eigen::MatrixXd reward(n, n_actions);
    for (int a = 0; a < n_actions; ++a) reward.col(a) = transition[a] * entry;

    Eigen::MatrixXd coords(n, 4);
    for (int p = 0; p < w; ++p)
        for (int b = 0; b < w; ++b)
            for (int r = 0; r < h; ++r) {
                const int s = catch_index(spec, p, b, r);
                coords(s, 0) = p;      // x_paddle
                coords(s, 1) = h - 1;  // y_paddle (fixed bottom row)
                coords(s, 2) = b;      // x_ball
                coords(s, 3) = r;      // y_ball
            }

    return Environment{"catch", spec,
                       TabularMdp(std::move(reward), std::move(transition), spec.gamma),
                       std::move(entry), Eigen::VectorXd::Constant(n, 1.0 / n),
                       std::move(coords)};
}

// ---------------------------------------------------------------------------
// Three-state diagnostic MDP
//
// States {s0, s1, s2}; every transition into s0 pays reward 1; from s1 and
// s2 every action returns to s0 surely. Action rows out of s0 are
// configurable; the default instance uses p(.|s0, action0) = (0.6, 0.4, 0)
// and p(.|s0, action1) = (0.4, 0.2, 0.4), where action0 is optimal because
// it re-enters s0 most often.
// ---------------------------------------------------------------------------

inline Environment build_three_state_mdp(const std::vector<Eigen::Vector3d>& s0_rows,
                                         double gamma = 0.99) {
    const int n = 3;
    const int n_actions = static_cast<int>(s0_rows.size());
    if (n_actions < 1) throw std::invalid_argument("need at least one action row");

    Eigen::VectorXd entry(n);
    entry << 1.0, 0.0, 0.0;

    std::vector<Eigen::MatrixXd> transition(static_cast<std::size_t>(n_actions));
    for (int a = 0; a < n_actions; ++a) {
        Eigen::MatrixXd p = Eigen::MatrixXd::Zero(n, n);
        p.row(0) = s0_rows[static_cast<std::size_t>(a)].transpose();
        p(1, 0) = 1.0;
        p(2, 0) = 1.0;
        transition[static_cast<std::size_t>(a)] = p;
    }

    Eigen::MatrixXd reward(n, n_actions);
    for (int a = 0; a < n_actions; ++a)
        reward.col(a) = transition[static_cast<std::size_t>(a)] * entry;

    Eigen::MatrixXd coords(n, 1);
    coords << 0, 1, 2;

    GridSpec spec;
    spec.width = 3;
    spec.height = 1;
    spec.gamma = gamma;
    return Environment{"three_state", spec,
                       TabularMdp(std::move(reward), std::move(transition), gamma),
                       std::move(entry), Eigen::VectorXd::Constant(n, 1.0 / n),
                       std::move(coords)};
}

inline Environment build_toy_mdp(double gamma = 0.99) {
    return build_three_state_mdp(
        {Eigen::Vector3d(0.6, 0.4, 0.0), Eigen::Vector3d(0.4, 0.2, 0.4)}, gamma);
}

// ---------------------------------------------------------------------------
// Experience datasets
// ---------------------------------------------------------------------------

struct Transition {
    int s;
    int a;
    double r;
    int s_next;
};

// (state, next_state, count) cell of the per-action count matrix; the MLE
// loss iterates these instead of the dense matrix.
struct CountCell {
    int s;
    int s_next;
    double count;
};

// Experience tuples plus the sufficient statistics both losses train on.
// Unvisited (s, a) cells carry an all-zero p_hat row and reward_mean 0 and
// are excluded from the losses via the visited lists.
class TransitionDataset {
  public:
    TransitionDataset(int n_states, int n_actions, std::vector<Transition> tuples)
        : n_states_(n_states), n_actions_(n_actions), tuples_(std::move(tuples)) {
        if (n_states_ <= 0 || n_actions_ <= 0)
            throw std::invalid_argument("empty state or action space");
        counts_.assign(static_cast<std::size_t>(n_actions_),
                       Eigen::MatrixXd::Zero(n_states_, n_states_));
        visit_counts_ = Eigen::MatrixXd::Zero(n_states_, n_actions_);
        reward_mean_ = Eigen::MatrixXd::Zero(n_states_, n_actions_);
        for (const Transition& t : tuples_) {
            if (t.s < 0 || t.s >= n_states_ || t.s_next < 0 || t.s_next >= n_states_ ||
                t.a < 0 || t.a >= n_actions_)
                throw std::invalid_argument("transition tuple index out of range");
            if (!std::isfinite(t.r)) throw std::invalid_argument("non-finite reward");
            counts_[static_cast<std::size_t>(t.a)](t.s, t.s_next) += 1.0;
            visit_counts_(t.s, t.a) += 1.0;
            reward_mean_(t.s, t.a) += t.r;
        }
        p_hat_.assign(static_cast<std::size_t>(n_actions_),
                      Eigen::MatrixXd::Zero(n_states_, n_states_));
        visited_.assign(static_cast<std::size_t>(n_actions_), {});
        cells_.assign(static_cast<std::size_t>(n_actions_), {});
        for (int a = 0; a < n_actions_; ++a) {
            for (int s = 0; s < n_states_; ++s) {
                const double m = visit_counts_(s, a);
                if (m == 0.0) continue;
                reward_mean_(s, a) /= m;
                p_hat_[static_cast<std::size_t>(a)].row(s) =
                    counts_[static_cast<std::size_t>(a)].row(s) / m;
                visited_[static_cast<std::size_t>(a)].push_back(s);
                for (int s2 = 0; s2 < n_states_; ++s2) {
                    const double c = counts_[static_cast<std::size_t>(a)](s, s2);
                    if (c > 0.0) cells_[static_cast<std::size_t>(a)].push_back({s, s2, c});
                }
            }
        }
    }

    int n_states() const { return n_states_; }
    int n_actions() const { return n_actions_; }
    const std::vector<Transition>& tuples() const { return tuples_; }
    const Eigen::MatrixXd& counts(int a) const { return counts_[static_cast<std::size_t>(a)]; }
    const Eigen::MatrixXd& visit_counts() const { return visit_counts_; }
    const Eigen::MatrixXd& reward_mean() const { return reward_mean_; }
    const Eigen::MatrixXd& p_hat(int a) const { return p_hat_[static_cast<std::size_t>(a)]; }
    const std::vector<int>& visited_states(int a) const {
        return visited_[static_cast<std::size_t>(a)];
    }
    const std::vector<CountCell>& count_cells(int a) const {
        return cells_[static_cast<std::size_t>(a)];
    }
    bool visited(int s, int a) const { return visit_counts_(s, a) > 0.0; }

  private:
    int n_states_;
    int n_actions_;
    std::vector<Transition> tuples_;
    std::vector<Eigen::MatrixXd> counts_;
    Eigen::MatrixXd visit_counts_;
    Eigen::MatrixXd reward_mean_;
    std::vector<Eigen::MatrixXd> p_hat_;
    std::vector<std::vector<int>> visited_;
    std::vector<std::vector<CountCell>> cells_;
};

// One continuing uniform-random-policy trajectory of n_samples steps.
// Realized rewards are entry_reward(s'); the start state is drawn from
// start_distribution once.
inline TransitionDataset collect_dataset(const TabularMdp& mdp,
                                         const Eigen::VectorXd& entry_reward,
                                         const Eigen::VectorXd& start_distribution,
                                         long n_samples, std::uint64_t rng_seed) {
    if (n_samples < 1) throw std::invalid_argument("need at least one sample");
    Rng rng(rng_seed);
    // CDFs stored transposed so the table for state s is a contiguous column.
    std::vector<Eigen::MatrixXd> cdfs_t;
    cdfs_t.reserve(static_cast<std::size_t>(mdp.n_actions()));
    for (int a = 0; a < mdp.n_actions(); ++a)
        cdfs_t.push_back(row_cdfs(mdp.transition(a)).transpose());
    const Eigen::MatrixXd start_cdf = row_cdfs(start_distribution.transpose());

    std::vector<Transition> tuples;
    tuples.reserve(static_cast<std::size_t>(n_samples));
    int s = rng.categorical_cdf(start_cdf.data(), mdp.n_states());
    for (long i = 0; i < n_samples; ++i) {
        const int a = rng.uniform_int(mdp.n_actions());
        const int s_next = rng.categorical_cdf(cdfs_t[static_cast<std::size_t>(a)].col(s).data(),
                                               mdp.n_states());
        tuples.push_back({s, a, entry_reward[s_next], s_next});
        s = s_next;
    }
    return TransitionDataset(mdp.n_states(), mdp.n_actions(), std::move(tuples));
}

inline TransitionDataset collect_dataset(const Environment& env, long n_samples,
                                         std::uint64_t rng_seed) {
    return collect_dataset(env.mdp, env.entry_reward, env.start_distribution, n_samples,
                           rng_seed);
}

// Generic-MDP overload: uniform start, realized reward = expected reward.
inline TransitionDataset collect_dataset(const TabularMdp& mdp, long n_samples,
                                         std::uint64_t rng_seed) {
    if (n_samples < 1) throw std::invalid_argument("need at least one sample");
    Rng rng(rng_seed);
    std::vector<Eigen::MatrixXd> cdfs_t;
    cdfs_t.reserve(static_cast<std::size_t>(mdp.n_actions()));
    for (int a = 0; a < mdp.n_actions(); ++a)
        cdfs_t.push_back(row_cdfs(mdp.transition(a)).transpose());
    std::vector<Transition> tuples;
    tuples.reserve(static_cast<std::size_t>(n_samples));
    int s = rng.uniform_int(mdp.n_states());
    for (long i = 0; i < n_samples; ++i) {
        const int a = rng.uniform_int(mdp.n_actions());
        const int s_next = rng.categorical_cdf(cdfs_t[static_cast<std::size_t>(a)].col(s).data(),
                                               mdp.n_states());
        tuples.push_back({s, a, mdp.reward()(s, a), s_next});
        s = s_next;
    }
    return TransitionDataset(mdp.n_states(), mdp.n_actions(), std::move(tuples));
}

// Dataset file format: header `s,a,r,s_next`, one tuple per line.
inline void save_dataset_csv(const std::string& path, const TransitionDataset& d) {
    std::ofstream f = open_out(path);
    f << "s,a,r,s_next\n";
    for (const Transition& t : d.tuples())
        f << t.s << ',' << t.a << ',' << format_exact(t.r) << ',' << t.s_next << '\n';
}

inline TransitionDataset load_dataset_csv(const std::string& path, int n_states,
                                          int n_actions) {
    std::ifstream f = open_in(path);
    std::string line;
    if (!std::getline(f, line) || split_csv_line(line) != std::vector<std::string>{"s", "a", "r", "s_next"})
        throw std::runtime_error("bad dataset header in " + path);
    std::vector<Transition> tuples;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        const auto fields = split_csv_line(line);
        if (fields.size() != 4) throw std::runtime_error("bad dataset row in " + path);
        tuples.push_back({static_cast<int>(parse_long(fields[0])),
                          static_cast<int>(parse_long(fields[1])), parse_double(fields[2]),
                          static_cast<int>(parse_long(fields[3]))});
    }
    return TransitionDataset(n_states, n_actions, std::move(tuples));
}

}  // namespace veq
