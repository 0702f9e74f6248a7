#include "transfertraj/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <string_view>
#include <unordered_map>
#include <utility>

#include "transfertraj/rng.hpp"

namespace transfertraj {

namespace {

constexpr double kMetersPerDegLat = 111194.92664455873;
constexpr double kDegToRad = M_PI / 180.0;
constexpr std::int64_t kSynthEpoch = 1704067200;  // 2024-01-01T00:00:00Z
constexpr std::int64_t kDepartureWindowS = 30LL * 86400;
constexpr double kGridMarginM = 15.0;
constexpr double kPoiJitterM = 5.0;
constexpr int kClusterSize = 18;

const char* const kPoiVocab[] = {
    "coffee shop",   "noodle restaurant", "bakery",      "pharmacy",
    "bookstore",     "convenience store", "gym",         "bank branch",
    "flower shop",   "barber shop",       "art museum",  "bus stop",
};
const char* const kRoadVocab[] = {
    "two lane city avenue",   "four lane arterial avenue", "narrow service lane",
    "tree lined boulevard",   "one way side lane",         "cobbled market lane",
    "six lane ring avenue",   "quiet residential lane",
};

[[noreturn]] void fail_line(int lineno, const std::string& what) {
  throw ParseError("line " + std::to_string(lineno) + ": " + what);
}

double parse_double(std::string_view tok, int lineno) {
  double v = 0.0;
  const auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (res.ec != std::errc{} || res.ptr != tok.data() + tok.size()) {
    fail_line(lineno, "expected a number, got \"" + std::string(tok) + "\"");
  }
  return v;
}

std::int64_t parse_time(std::string_view tok, int lineno) {
  std::int64_t v = 0;
  const auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (res.ec != std::errc{} || res.ptr != tok.data() + tok.size()) {
    fail_line(lineno, "expected an integer timestamp, got \"" + std::string(tok) + "\"");
  }
  return v;
}

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  size_t start = 0;
  while (true) {
    const size_t pos = s.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(s.substr(start));
      return out;
    }
    out.push_back(s.substr(start, pos - start));
    start = pos + 1;
  }
}

void check_point(const TrajectoryPoint& p, const Trajectory& traj, int lineno) {
  if (p.lng < -180.0 || p.lng > 180.0 || p.lat < -90.0 || p.lat > 90.0) {
    fail_line(lineno, "coordinate out of range");
  }
  if (!traj.points.empty() && p.t < traj.points.back().t) {
    fail_line(lineno, "timestamps regress within trajectory \"" + traj.id + "\"");
  }
}

}  // namespace

std::vector<Trajectory> ingest(const std::string& path, IngestFormat format) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);

  std::vector<Trajectory> out;
  std::unordered_map<std::string, size_t> slot;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (format == IngestFormat::PointRows) {
      const auto fields = split(line, ',');
      if (fields.size() != 4) fail_line(lineno, "expected traj_id,lng,lat,t");
      const std::string id(fields[0]);
      auto it = slot.find(id);
      if (it == slot.end()) {
        it = slot.emplace(id, out.size()).first;
        out.push_back({id, {}});
      }
      Trajectory& traj = out[it->second];
      TrajectoryPoint p;
      p.lng = parse_double(fields[1], lineno);
      p.lat = parse_double(fields[2], lineno);
      p.t = parse_time(fields[3], lineno);
      check_point(p, traj, lineno);
      traj.points.push_back(p);
    } else {
      const size_t comma = line.find(',');
      if (comma == std::string_view::npos) fail_line(lineno, "expected id,point;point;...");
      Trajectory traj;
      traj.id = line.substr(0, comma);
      for (const std::string_view rec : split(std::string_view(line).substr(comma + 1), ';')) {
        const auto parts = split(rec, ' ');
        if (parts.size() != 3) {
          fail_line(lineno, "expected \"lng lat t\", got \"" + std::string(rec) + "\"");
        }
        TrajectoryPoint p;
        p.lng = parse_double(parts[0], lineno);
        p.lat = parse_double(parts[1], lineno);
        p.t = parse_time(parts[2], lineno);
        check_point(p, traj, lineno);
        traj.points.push_back(p);
      }
      if (traj.points.empty()) fail_line(lineno, "trajectory has no points");
      out.push_back(std::move(traj));
    }
  }
  if (out.empty()) {
    std::fprintf(stderr, "warning: %s: no trajectories found\n", path.c_str());
  }
  return out;
}

void write_trajectories(const std::string& path, const std::vector<Trajectory>& trajs,
                        IngestFormat format) {
  std::ofstream outf(path);
  if (!outf) throw IoError("cannot open " + path + " for writing");
  char buf[96];
  for (const Trajectory& traj : trajs) {
    if (format == IngestFormat::PointRows) {
      for (const TrajectoryPoint& p : traj.points) {
        std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%lld", p.lng, p.lat,
                      static_cast<long long>(p.t));
        outf << traj.id << ',' << buf << '\n';
      }
    } else {
      outf << traj.id << ',';
      for (size_t i = 0; i < traj.points.size(); ++i) {
        const TrajectoryPoint& p = traj.points[i];
        std::snprintf(buf, sizeof(buf), "%.17g %.17g %lld", p.lng, p.lat,
                      static_cast<long long>(p.t));
        outf << (i ? ";" : "") << buf;
      }
      outf << '\n';
    }
  }
  if (!outf) throw IoError("failed writing " + path);
}

Trajectory three_hop_resample(const Trajectory& traj) {
  Trajectory out;
  out.id = traj.id;
  const int n = static_cast<int>(traj.points.size());
  for (int i = 0; i < n; i += 3) out.points.push_back(traj.points[i]);
  if (n > 1 && (n - 1) % 3 != 0) out.points.push_back(traj.points[n - 1]);
  return out;
}

std::vector<Trajectory> filter_lengths(std::vector<Trajectory> trajs, int min_len, int max_len) {
  std::vector<Trajectory> out;
  for (Trajectory& t : trajs) {
    const int n = static_cast<int>(t.points.size());
    if (n >= min_len && n <= max_len) out.push_back(std::move(t));
  }
  return out;
}

DatasetSplit chronological_split(std::vector<Trajectory> trajs, int r_train, int r_val,
                                 int r_test) {
  if (r_train <= 0 || r_val <= 0 || r_test <= 0) {
    throw InvalidConfig("split ratios must be positive");
  }
  for (const Trajectory& t : trajs) {
    if (t.points.empty()) throw EmptyTrajectory("trajectory \"" + t.id + "\" has no points");
  }
  std::stable_sort(trajs.begin(), trajs.end(), [](const Trajectory& a, const Trajectory& b) {
    return a.points.front().t < b.points.front().t;
  });
  const long long n = static_cast<long long>(trajs.size());
  const long long total = r_train + r_val + r_test;
  const long long n_train = n * r_train / total;
  const long long n_val = n * r_val / total;

  DatasetSplit out;
  out.train.assign(trajs.begin(), trajs.begin() + n_train);
  out.val.assign(trajs.begin() + n_train, trajs.begin() + n_train + n_val);
  out.test.assign(trajs.begin() + n_train + n_val, trajs.end());
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic region generator
// ---------------------------------------------------------------------------

namespace {

struct GridGeom {
  double lng0 = 0.0;
  double lat0 = 0.0;
  double dlng = 0.0;
  double dlat = 0.0;
  int nx = 0;
  int ny = 0;
  int nx_district = 0;  // column count of each district (dense left, sparse right)
  double m_per_deg_lng = 0.0;

  double lng(int ix) const { return lng0 + ix * dlng; }
  double lat(int iy) const { return lat0 + iy * dlat; }
};

GridGeom grid_geometry(const SynthRegionSpec& s) {
  GridGeom g;
  const double lat_c = 0.5 * (s.lat_min + s.lat_max);
  g.m_per_deg_lng = kMetersPerDegLat * std::cos(lat_c * kDegToRad);
  g.dlat = s.grid_spacing_m / kMetersPerDegLat;
  g.dlng = s.grid_spacing_m / g.m_per_deg_lng;
  const double margin_lat = kGridMarginM / kMetersPerDegLat;
  const double margin_lng = kGridMarginM / g.m_per_deg_lng;
  g.lng0 = s.lng_min + margin_lng;
  g.lat0 = s.lat_min + margin_lat;
  const double usable_lng = s.lng_max - margin_lng - g.lng0;
  const double usable_lat = s.lat_max - margin_lat - g.lat0;
  g.nx = usable_lng >= 0.0 ? static_cast<int>(usable_lng / g.dlng) + 1 : 0;
  g.ny = usable_lat >= 0.0 ? static_cast<int>(usable_lat / g.dlat) + 1 : 0;
  g.nx_district = std::max(2, g.nx / 3);
  return g;
}

struct Node {
  int x = 0;
  int y = 0;
};

int manhattan(Node a, Node b) { return std::abs(a.x - b.x) + std::abs(a.y - b.y); }

// Grid walk from a to b. The staircase variant alternates axes every step so
// dense-district trips turn at nearly every node; otherwise the horizontal leg
// runs first, giving one turn at most.
std::vector<Node> route(Node a, Node b, bool staircase) {
  std::vector<Node> path{a};
  Node cur = a;
  bool prefer_x = true;
  while (cur.x != b.x || cur.y != b.y) {
    const bool can_x = cur.x != b.x;
    const bool can_y = cur.y != b.y;
    bool step_x = can_x;
    if (staircase) {
      step_x = can_x && (prefer_x || !can_y);
      prefer_x = !prefer_x;
    }
    if (step_x) {
      cur.x += b.x > cur.x ? 1 : -1;
    } else {
      cur.y += b.y > cur.y ? 1 : -1;
    }
    path.push_back(cur);
  }
  return path;
}

std::pair<Node, Node> pick_trip(const std::vector<Node>& starts, const std::vector<Node>& ends,
                                Rng& rng) {
  for (int attempt = 0; attempt < 64; ++attempt) {
    const Node a = starts[rng.uniform_int(0, static_cast<int>(starts.size()) - 1)];
    const Node b = ends[rng.uniform_int(0, static_cast<int>(ends.size()) - 1)];
    if (manhattan(a, b) >= 3) return {a, b};
  }
  return {starts.front(), ends.back()};
}

}  // namespace

void SynthRegionSpec::validate() const {
  if (lng_min >= lng_max || lat_min >= lat_max) throw InvalidSpec("empty coordinate box");
  if (lat_min < -85.0 || lat_max > 85.0) throw InvalidSpec("latitude band must stay within ±85°");
  if (grid_spacing_m <= 0.0) throw InvalidSpec("grid spacing must be positive");
  if (n_pois <= 0 || n_roads <= 0 || n_trajectories <= 0) {
    throw InvalidSpec("counts must be positive");
  }
  if (dense_speed_mps <= 0.0 || sparse_speed_mps <= 0.0) {
    throw InvalidSpec("speeds must be positive");
  }
  if (sampling_interval_s <= 0) throw InvalidSpec("sampling interval must be positive");
  const GridGeom g = grid_geometry(*this);
  if (g.nx < 4 || g.ny < 2) {
    throw InvalidSpec("coordinate box too small for the grid spacing");
  }
}

GridNodes grid_nodes(const SynthRegionSpec& spec) {
  spec.validate();
  const GridGeom g = grid_geometry(spec);
  GridNodes out;
  out.nx = g.nx;
  out.ny = g.ny;
  out.nodes.reserve(static_cast<size_t>(g.nx) * g.ny);
  for (int iy = 0; iy < g.ny; ++iy) {
    for (int ix = 0; ix < g.nx; ++ix) out.nodes.push_back({g.lng(ix), g.lat(iy)});
  }
  return out;
}

SynthRegion generate_region(const SynthRegionSpec& spec) {
  spec.validate();
  const GridGeom g = grid_geometry(spec);
  Rng rng(derive_seed(spec.seed, "synth-region"));
  SynthRegion region;

  std::vector<Node> dense_nodes;
  std::vector<Node> sparse_nodes;
  for (int iy = 0; iy < g.ny; ++iy) {
    for (int ix = 0; ix < g.nx_district; ++ix) dense_nodes.push_back({ix, iy});
    for (int ix = g.nx - g.nx_district; ix < g.nx; ++ix) sparse_nodes.push_back({ix, iy});
  }

  // POIs: most sit in tight clusters on evenly spread dense-district nodes;
  // the rest scatter thinly over the sparse district.
  const int n_scatter =
      std::min(spec.n_pois / 10, 2 * static_cast<int>(sparse_nodes.size()));
  const int n_clustered = spec.n_pois - n_scatter;
  const int n_clusters = std::max(1, (n_clustered + kClusterSize - 1) / kClusterSize);
  std::vector<Node> centers;
  for (int c = 0; c < n_clusters; ++c) {
    const size_t idx = static_cast<size_t>(2 * c + 1) * dense_nodes.size() / (2 * n_clusters);
    centers.push_back(dense_nodes[idx]);
  }
  const auto jittered_poi = [&](Node node) {
    Poi poi;
    poi.lng = g.lng(node.x) + rng.uniform(-kPoiJitterM, kPoiJitterM) / g.m_per_deg_lng;
    poi.lat = g.lat(node.y) + rng.uniform(-kPoiJitterM, kPoiJitterM) / kMetersPerDegLat;
    poi.desc = kPoiVocab[rng.uniform_int(0, std::size(kPoiVocab) - 1)];
    return poi;
  };
  for (int i = 0; i < n_clustered; ++i) {
    region.pois.push_back(jittered_poi(centers[std::min(i / kClusterSize, n_clusters - 1)]));
  }
  for (int k = 0; k < n_scatter; ++k) {
    const size_t idx = static_cast<size_t>(k) * sparse_nodes.size() / n_scatter;
    region.pois.push_back(jittered_poi(sparse_nodes[idx]));
  }

  // Roads: evenly strided sample of the grid's edges, midpoint-located.
  struct Edge {
    Node a, b;
  };
  std::vector<Edge> edges;
  for (int iy = 0; iy < g.ny; ++iy) {
    for (int ix = 0; ix + 1 < g.nx; ++ix) edges.push_back({{ix, iy}, {ix + 1, iy}});
  }
  for (int iy = 0; iy + 1 < g.ny; ++iy) {
    for (int ix = 0; ix < g.nx; ++ix) edges.push_back({{ix, iy}, {ix, iy + 1}});
  }
  const int n_roads = std::min<int>(spec.n_roads, static_cast<int>(edges.size()));
  char len_buf[32];
  std::snprintf(len_buf, sizeof(len_buf), ", %.0f m", spec.grid_spacing_m);
  for (int k = 0; k < n_roads; ++k) {
    const Edge& e = edges[static_cast<size_t>(k) * edges.size() / n_roads];
    RoadSegment seg;
    seg.lng = 0.5 * (g.lng(e.a.x) + g.lng(e.b.x));
    seg.lat = 0.5 * (g.lat(e.a.y) + g.lat(e.b.y));
    seg.desc = std::string(kRoadVocab[rng.uniform_int(0, std::size(kRoadVocab) - 1)]) + len_buf;
    region.roads.push_back(seg);
  }

  // Trips alternate districts. Dense trips run cluster-to-cluster, slow, with
  // a turn at nearly every node; sparse trips run fast and straight.
  for (int k = 0; k < spec.n_trajectories; ++k) {
    const bool dense_trip = k % 2 == 0;
    const auto [a, b] = dense_trip
                            ? (centers.size() >= 2 ? pick_trip(centers, centers, rng)
                                                   : pick_trip(centers, dense_nodes, rng))
                            : pick_trip(sparse_nodes, sparse_nodes, rng);
    const std::vector<Node> path = route(a, b, dense_trip);
    const double speed = dense_trip ? spec.dense_speed_mps : spec.sparse_speed_mps;
    const double total_m = spec.grid_spacing_m * static_cast<double>(path.size() - 1);
    const double hop_m = speed * spec.sampling_interval_s;
    const std::int64_t t0 = kSynthEpoch + rng.uniform_int(0, kDepartureWindowS - 1);

    Trajectory traj;
    traj.id = "synth-" + std::to_string(spec.seed) + "-" + std::to_string(k);
    const int n_pts = static_cast<int>(total_m / hop_m) + 1;
    for (int i = 0; i < n_pts; ++i) {
      const double s = hop_m * static_cast<double>(i) / spec.grid_spacing_m;
      const int e = std::min(static_cast<int>(s), static_cast<int>(path.size()) - 2);
      const double frac = s - e;
      TrajectoryPoint p;
      p.lng = g.lng(path[e].x) + frac * (g.lng(path[e + 1].x) - g.lng(path[e].x));
      p.lat = g.lat(path[e].y) + frac * (g.lat(path[e + 1].y) - g.lat(path[e].y));
      p.t = t0 + static_cast<std::int64_t>(i) * spec.sampling_interval_s;
      traj.points.push_back(p);
    }
    region.trajectories.push_back(std::move(traj));
  }
  return region;
}

SynthRegion translate_region(const SynthRegion& region, double dlng, double dlat) {
  const auto shift = [&](double& lng, double& lat) {
    lng += dlng;
    lat += dlat;
    if (lng < -180.0 || lng > 180.0 || lat < -90.0 || lat > 90.0) {
      throw OutOfRange("translated coordinate leaves the valid range");
    }
  };
  SynthRegion out = region;
  for (Poi& p : out.pois) shift(p.lng, p.lat);
  for (RoadSegment& r : out.roads) shift(r.lng, r.lat);
  for (Trajectory& t : out.trajectories) {
    for (TrajectoryPoint& p : t.points) shift(p.lng, p.lat);
  }
  return out;
}

}  // namespace transfertraj
