#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "transfertraj/types.hpp"

namespace transfertraj {

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

// Train/val/test partition, chronological by departure time: every training
// departure precedes every validation departure, which precedes every test
// departure.
struct DatasetSplit {
  std::vector<Trajectory> train;
  std::vector<Trajectory> val;
  std::vector<Trajectory> test;
};

enum class IngestFormat {
  PointRows,    // one point per line: traj_id,lng,lat,t (points sorted within id)
  LineRecords,  // one trajectory per line: id,"lng lat t" triples joined by ';'
};

// Parses a trajectory file. Malformed content raises ParseError naming the
// offending line; unreadable files raise IoError. An empty file is legal and
// yields an empty list with a warning on stderr.
std::vector<Trajectory> ingest(const std::string& path, IngestFormat format);

// Inverse of ingest: writes trajectories in either text format, doubles
// printed round-trip exact.
void write_trajectories(const std::string& path, const std::vector<Trajectory>& trajs,
                        IngestFormat format);

// Keeps 0-based indices divisible by 3 plus the final point, stretching the
// effective sampling interval threefold. Never lengthens the input; first and
// last points always survive.
Trajectory three_hop_resample(const Trajectory& traj);

// Keeps trajectories with min_len <= n <= max_len, bounds inclusive.
std::vector<Trajectory> filter_lengths(std::vector<Trajectory> trajs, int min_len = 5,
                                       int max_len = 120);

// Sorts by departure time (ties keep input order) and partitions at the
// cumulative ratio boundaries: floor for train, floor for val, remainder test.
DatasetSplit chronological_split(std::vector<Trajectory> trajs, int r_train = 8, int r_val = 1,
                                 int r_test = 1);

// ---------------------------------------------------------------------------
// Synthetic region generator
// ---------------------------------------------------------------------------

// Everything the generator is allowed to randomize, pinned by one seed. The
// region is a street grid with two districts: a dense one whose nodes host
// point-of-interest clusters and whose trips run slow with frequent turns, and
// a sparse one with scattered context and fast straight trips.
struct SynthRegionSpec {
  std::uint64_t seed = 0;
  double lng_min = 116.300;
  double lng_max = 116.330;
  double lat_min = 39.900;
  double lat_max = 39.920;
  double grid_spacing_m = 160.0;
  int n_pois = 160;
  int n_roads = 60;
  int n_trajectories = 64;
  double dense_speed_mps = 4.0;
  double sparse_speed_mps = 8.0;
  int sampling_interval_s = 10;

  // Throws InvalidSpec on an empty box, nonpositive counts, or a grid too
  // small to hold both districts.
  void validate() const;
};

// A generated (or ingested) region: context stores plus the trips recorded in
// it. Plain data so it can be shifted, serialized, and diffed.
struct SynthRegion {
  std::vector<Poi> pois;
  std::vector<RoadSegment> roads;
  std::vector<Trajectory> trajectories;
};

// Deterministic per spec.seed: same spec, bit-identical region.
SynthRegion generate_region(const SynthRegionSpec& spec);

// The street lattice trips run on: node (ix, iy) of the nx x ny grid sits at
// row-major index iy * nx + ix. Useful for building evaluation trips that
// follow the region's roads.
struct GridNodes {
  int nx = 0;
  int ny = 0;
  std::vector<GeoPoint> nodes;

  const GeoPoint& at(int ix, int iy) const { return nodes[iy * nx + ix]; }
};
GridNodes grid_nodes(const SynthRegionSpec& spec);

// Shifts every POI, road, and trajectory point by the same offset, leaving
// descriptions and timestamps untouched. Throws OutOfRange if any coordinate
// would leave [-180, 180] x [-90, 90].
SynthRegion translate_region(const SynthRegion& region, double dlng, double dlat);

}  // namespace transfertraj
