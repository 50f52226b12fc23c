#pragma once

// Force-directed 2-D placement of the task space. Pairwise attraction weights
// come from mutual ranking positions (tasks that rank each other highly pull
// together); placement is the standard Fruchterman-Reingold iteration with
// uniform repulsion and geometric cooling.

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "taskemb/common.hpp"
#include "taskemb/rankeval.hpp"

namespace taskemb::layout {

// Attraction between two tasks from their ranks in each other's source
// rankings: 1/rank_of_a_for_b + 1/rank_of_b_for_a. Ranks are 1-based (ties may
// make them fractional but never below 1); anything < 1 is rejected.
double pair_force(double rank_of_a_for_b, double rank_of_b_for_a);

struct LayoutParams {
  std::size_t iterations = 500;
  double cooling = 0.95;        // geometric temperature decay per iteration
  double area = 1.0;            // layout area; side = sqrt(area)
  double initial_temperature = 0.0;  // 0 => side / 10
  std::uint64_t seed = 0;

  void validate() const;
};

struct TaskGraph {
  std::vector<std::string> nodes;
  // Symmetric positive attraction weights, stored once per pair with i < j.
  std::map<std::pair<std::size_t, std::size_t>, double> weights;
  LayoutParams params;

  // Builds the graph from one source ranking per task: the weight between two
  // tasks combines the rank each occupies in the other's ranking. Every
  // ranking must cover every other node. Nodes are sorted by id.
  static TaskGraph from_rankings(const std::vector<rank::Ranking>& rankings,
                                 LayoutParams params = {});

  std::size_t index_of(const std::string& node) const;
  void set_weight(const std::string& a, const std::string& b, double w);
  double weight(std::size_t i, std::size_t j) const;  // 0 when unconnected
  void validate() const;
};

struct Point {
  double x = 0.0;
  double y = 0.0;
};

// Runs the placement: random initial positions (deterministic in params.seed),
// then up to params.iterations rounds of repulsion + weighted attraction with
// per-node displacement capped by the current temperature, stopping early once
// the largest displacement falls below 1e-6 * side. The returned coordinates
// are translation-normalized so the centroid sits at the origin. When
// max_disp_trace is given it receives the realized per-iteration maximum
// displacement (for verifying the temperature bound).
std::vector<Point> fr_layout(const TaskGraph& graph,
                             std::vector<double>* max_disp_trace = nullptr);

// {"nodes": [{"task","x","y"}...], "edges": [{"a","b","weight"}...]} in
// deterministic order (nodes as in the graph, edges by index pair).
nlohmann::json layout_json(const TaskGraph& graph, const std::vector<Point>& pts);

void write_layout_json(const TaskGraph& graph, const std::vector<Point>& pts,
                       const std::string& path);

}  // namespace taskemb::layout
