#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "transfertraj/types.hpp"

namespace transfertraj {

// Great-circle distance in meters on a spherical earth (R = 6,371,000 m).
double haversine_m(const GeoPoint& a, const GeoPoint& b);

std::string sha256_hex(const std::string& text);

// ---------------------------------------------------------------------------
// Spatial index
// ---------------------------------------------------------------------------

struct NeighborHit {
  int index = -1;      // position in the backing store
  double dist_m = 0.0;
};

// Uniform lng/lat grid over point items. Cell edges are sized to at least
// `cell_m` meters at the data's extreme latitude, so a radius <= cell_m query
// is always covered by the 3x3 block around the query's cell.
class GridIndex {
 public:
  GridIndex() = default;
  GridIndex(const std::vector<GeoPoint>& items, double cell_m);

  // Items within radius_m of `query` (inclusive), ordered by distance and, on
  // exact ties, by insertion order. radius_m must not exceed the cell size.
  std::vector<NeighborHit> query(const GeoPoint& query, double radius_m) const;

  int size() const { return static_cast<int>(items_.size()); }

 private:
  std::vector<GeoPoint> items_;
  std::map<std::pair<std::int64_t, std::int64_t>, std::vector<int>> cells_;
  double cell_lng_deg_ = 0.0;
  double cell_lat_deg_ = 0.0;
  double cell_m_ = 0.0;

  std::pair<std::int64_t, std::int64_t> cell_of(const GeoPoint& p) const;
};

// ---------------------------------------------------------------------------
// Text embedding providers
// ---------------------------------------------------------------------------

class TextEmbeddingProvider {
 public:
  virtual ~TextEmbeddingProvider() = default;
  virtual int dim() const = 0;
  virtual std::string name() const = 0;
  // One embedding row per input text. Throws ProviderUnavailable on failure.
  virtual std::vector<Eigen::VectorXd> embed(const std::vector<std::string>& texts) const = 0;
};

// Offline stand-in: a deterministic pseudo-random unit vector seeded from the
// SHA-256 of the text, so equal texts embed identically across runs and hosts.
class StubTextProvider : public TextEmbeddingProvider {
 public:
  explicit StubTextProvider(int dim);
  int dim() const override { return dim_; }
  std::string name() const override { return "stub"; }
  std::vector<Eigen::VectorXd> embed(const std::vector<std::string>& texts) const override;

 private:
  int dim_;
};

// HTTP adapter for a hosted embedding endpoint. Configuration comes from
// TT_EMBED_ENDPOINT (http://host[:port][/path]), optional TT_EMBED_API_KEY and
// TT_EMBED_MODEL. Requests POST {"model":..., "input":[texts]} and expect
// {"data":[{"embedding":[...]}, ...]}.
class RemoteTextProvider : public TextEmbeddingProvider {
 public:
  RemoteTextProvider(std::string endpoint, std::string api_key, std::string model, int dim);
  // nullptr when TT_EMBED_ENDPOINT is unset.
  static std::unique_ptr<RemoteTextProvider> from_env(int dim);

  int dim() const override { return dim_; }
  std::string name() const override { return "remote"; }
  std::vector<Eigen::VectorXd> embed(const std::vector<std::string>& texts) const override;

 private:
  std::string host_;
  std::string path_;
  std::string api_key_;
  std::string model_;
  int port_ = 80;
  int dim_;
};

// Content-addressed embedding cache; safe for concurrent readers with writes
// serialized internally.
class EmbeddingCache {
 public:
  std::optional<Eigen::VectorXd> get(const std::string& hash_hex) const;
  void put(const std::string& hash_hex, const Eigen::VectorXd& v);
  int size() const;

  // File format: one record per line, "hash dim v0 v1 ...", doubles printed
  // round-trip exact. load() merges; save() writes all entries sorted by hash.
  void load(const std::string& path);
  void save(const std::string& path) const;

 private:
  mutable std::mutex mu_;
  std::unordered_map<std::string, Eigen::VectorXd> entries_;
};

// ---------------------------------------------------------------------------
// Region context
// ---------------------------------------------------------------------------

// Immutable-after-build view of a region's POI and road stores plus their
// spatial indexes. The embedding cache is the only mutable member.
struct RegionContext {
  std::vector<Poi> pois;
  std::vector<RoadSegment> roads;
  GridIndex poi_index;
  GridIndex road_index;
  std::shared_ptr<EmbeddingCache> cache;
  std::shared_ptr<const TextEmbeddingProvider> provider;
};

RegionContext build_region_context(std::vector<Poi> pois, std::vector<RoadSegment> roads,
                                   double poi_radius_m, double road_radius_m,
                                   std::shared_ptr<const TextEmbeddingProvider> provider,
                                   std::shared_ptr<EmbeddingCache> cache = nullptr);

std::vector<NeighborHit> poi_neighbors(const RegionContext& ctx, const GeoPoint& p, double radius_m);
std::vector<NeighborHit> road_neighbors(const RegionContext& ctx, const GeoPoint& p, double radius_m);

// Embeddings for `texts`, cache-first, misses resolved through the provider in
// one batch and written back to the cache.
std::vector<Eigen::VectorXd> embed_texts(const TextEmbeddingProvider& provider,
                                         EmbeddingCache& cache,
                                         const std::vector<std::string>& texts);

// Mean of the neighbor-description embeddings within the radius, or nullopt
// when the neighbor set is empty (callers substitute a learnable null vector).
std::optional<Eigen::VectorXd> pooled_poi_context(const RegionContext& ctx, const GeoPoint& p,
                                                  double radius_m);
std::optional<Eigen::VectorXd> pooled_road_context(const RegionContext& ctx, const GeoPoint& p,
                                                   double radius_m);

// ---------------------------------------------------------------------------
// Store files (tab-separated: lng, lat, desc)
// ---------------------------------------------------------------------------

std::vector<Poi> load_poi_store(const std::string& path);
std::vector<RoadSegment> load_road_store(const std::string& path);
void save_poi_store(const std::string& path, const std::vector<Poi>& pois);
void save_road_store(const std::string& path, const std::vector<RoadSegment>& roads);

}  // namespace transfertraj
