#include "taskemb/layout.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace taskemb::layout {

double pair_force(double rank_of_a_for_b, double rank_of_b_for_a) {
  if (rank_of_a_for_b < 1.0 || rank_of_b_for_a < 1.0) {
    throw ValidationError("pair_force: ranks must be >= 1, got " +
                          fmt_real(rank_of_a_for_b) + " and " + fmt_real(rank_of_b_for_a));
  }
  return 1.0 / rank_of_a_for_b + 1.0 / rank_of_b_for_a;
}

void LayoutParams::validate() const {
  if (iterations == 0) throw ValidationError("layout: iterations must be positive");
  if (!(cooling > 0.0) || !(cooling < 1.0)) {
    throw ValidationError("layout: cooling factor must lie in (0, 1), got " + fmt_real(cooling));
  }
  if (!(area > 0.0)) throw ValidationError("layout: area must be positive");
  if (initial_temperature < 0.0) {
    throw ValidationError("layout: initial temperature must be non-negative");
  }
}

TaskGraph TaskGraph::from_rankings(const std::vector<rank::Ranking>& rankings,
                                   LayoutParams params) {
  if (rankings.size() < 2) {
    throw ValidationError("layout: need rankings for at least 2 tasks, got " +
                          std::to_string(rankings.size()));
  }
  TaskGraph g;
  g.params = params;
  std::map<std::string, const rank::Ranking*> by_target;
  for (const auto& r : rankings) {
    if (!by_target.emplace(r.target, &r).second) {
      throw ValidationError("layout: duplicate ranking for target '" + r.target + "'");
    }
  }
  for (const auto& [target, r] : by_target) {
    (void)r;
    g.nodes.push_back(target);
  }
  for (std::size_t i = 0; i < g.nodes.size(); ++i) {
    for (std::size_t j = i + 1; j < g.nodes.size(); ++j) {
      const double rank_i_for_j = by_target.at(g.nodes[j])->rank_of(g.nodes[i]);
      const double rank_j_for_i = by_target.at(g.nodes[i])->rank_of(g.nodes[j]);
      g.weights[{i, j}] = pair_force(rank_i_for_j, rank_j_for_i);
    }
  }
  g.validate();
  return g;
}

std::size_t TaskGraph::index_of(const std::string& node) const {
  auto it = std::find(nodes.begin(), nodes.end(), node);
  if (it == nodes.end()) throw ValidationError("layout: unknown node '" + node + "'");
  return std::size_t(it - nodes.begin());
}

void TaskGraph::set_weight(const std::string& a, const std::string& b, double w) {
  std::size_t i = index_of(a);
  std::size_t j = index_of(b);
  if (i == j) throw ValidationError("layout: self-edge on '" + a + "'");
  if (i > j) std::swap(i, j);
  if (!(w > 0.0)) {
    throw ValidationError("layout: attraction weight must be positive, got " + fmt_real(w));
  }
  weights[{i, j}] = w;
}

double TaskGraph::weight(std::size_t i, std::size_t j) const {
  if (i > j) std::swap(i, j);
  auto it = weights.find({i, j});
  return it == weights.end() ? 0.0 : it->second;
}

void TaskGraph::validate() const {
  if (nodes.size() < 2) {
    throw ValidationError("layout: need at least 2 nodes, got " + std::to_string(nodes.size()));
  }
  params.validate();
  for (const auto& [key, w] : weights) {
    if (key.first >= key.second || key.second >= nodes.size()) {
      throw ValidationError("layout: edge index out of range");
    }
    if (!(w > 0.0)) throw ValidationError("layout: attraction weight must be positive");
  }
}

std::vector<Point> fr_layout(const TaskGraph& graph, std::vector<double>* max_disp_trace) {
  graph.validate();
  const std::size_t n = graph.nodes.size();
  const double side = std::sqrt(graph.params.area);
  const double k = std::sqrt(graph.params.area / double(n));
  const double stop_below = 1e-6 * side;

  auto rng = make_rng(graph.params.seed, "layout-init");
  std::uniform_real_distribution<double> u(-side / 2.0, side / 2.0);
  std::vector<Point> pos(n);
  for (auto& p : pos) {
    p.x = u(rng);
    p.y = u(rng);
  }
  if (max_disp_trace) max_disp_trace->clear();

  double temperature = graph.params.initial_temperature > 0.0
                           ? graph.params.initial_temperature
                           : side / 10.0;
  std::vector<Point> disp(n);
  for (std::size_t iter = 0; iter < graph.params.iterations; ++iter) {
    for (auto& d : disp) d = {0.0, 0.0};

    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        double dx = pos[i].x - pos[j].x;
        double dy = pos[i].y - pos[j].y;
        double dist = std::sqrt(dx * dx + dy * dy);
        if (dist < 1e-12) {  // coincident points: push apart along a fixed axis
          dx = 1.0;
          dy = 0.0;
          dist = 1e-12;
        }
        const double ux = dx / dist;
        const double uy = dy / dist;
        const double rep = k * k / dist;
        disp[i].x += ux * rep;
        disp[i].y += uy * rep;
        disp[j].x -= ux * rep;
        disp[j].y -= uy * rep;
        const double w = graph.weight(i, j);
        if (w > 0.0) {
          const double att = w * dist * dist / k;
          disp[i].x -= ux * att;
          disp[i].y -= uy * att;
          disp[j].x += ux * att;
          disp[j].y += uy * att;
        }
      }
    }

    double max_moved = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double len = std::sqrt(disp[i].x * disp[i].x + disp[i].y * disp[i].y);
      if (len > 0.0) {
        const double step = std::min(len, temperature);
        pos[i].x += disp[i].x / len * step;
        pos[i].y += disp[i].y / len * step;
        max_moved = std::max(max_moved, step);
      }
    }
    if (max_disp_trace) max_disp_trace->push_back(max_moved);
    temperature *= graph.params.cooling;
    if (max_moved < stop_below) break;
  }

  double cx = 0.0, cy = 0.0;
  for (const auto& p : pos) {
    cx += p.x;
    cy += p.y;
  }
  cx /= double(n);
  cy /= double(n);
  for (auto& p : pos) {
    p.x -= cx;
    p.y -= cy;
  }
  return pos;
}

nlohmann::json layout_json(const TaskGraph& graph, const std::vector<Point>& pts) {
  if (pts.size() != graph.nodes.size()) {
    throw DimensionError("layout_json", std::to_string(graph.nodes.size()) + " coordinates",
                         std::to_string(pts.size()));
  }
  nlohmann::json nodes = nlohmann::json::array();
  for (std::size_t i = 0; i < graph.nodes.size(); ++i) {
    nodes.push_back({{"task", graph.nodes[i]}, {"x", pts[i].x}, {"y", pts[i].y}});
  }
  nlohmann::json edges = nlohmann::json::array();
  for (const auto& [key, w] : graph.weights) {
    edges.push_back(
        {{"a", graph.nodes[key.first]}, {"b", graph.nodes[key.second]}, {"weight", w}});
  }
  return nlohmann::json{{"nodes", nodes}, {"edges", edges}};
}

void write_layout_json(const TaskGraph& graph, const std::vector<Point>& pts,
                       const std::string& path) {
  atomic_write_file(path, layout_json(graph, pts).dump(2) + "\n");
}

}  // namespace taskemb::layout
