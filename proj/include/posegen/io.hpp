#pragma once

// Persistence: checkpoints, run ledger, image files and labeled datasets.

#include "posegen/ad.hpp"
#include "posegen/renderer.hpp"
#include "posegen/skeleton.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace posegen::io {

namespace fs = std::filesystem;

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Binary blob: "PGCK", version, config hash, kind, then named tensors.
void save_checkpoint(const fs::path& path, const std::string& kind, std::uint64_t config_hash,
                     const ad::ParamSet& params);

struct Checkpoint {
  std::string kind;
  std::uint64_t config_hash = 0;
  ad::ParamSet params;
};
Checkpoint read_checkpoint(const fs::path& path);

/// Loads into `params`, checking kind, hash, tensor names and shapes.
void load_checkpoint(const fs::path& path, const std::string& kind, std::uint64_t expected_hash, ad::ParamSet& params);

std::string read_text(const fs::path& path);
/// Writes through a temporary file and rename.
void write_text(const fs::path& path, const std::string& text);

std::string sha256_hex(const std::string& bytes);
std::string sha256_file(const fs::path& path);

/// 16-bit lossless PNG (grayscale or RGB).
void write_image(const fs::path& path, const render::Image& image);
render::Image read_image(const fs::path& path);
/// Rounds pixels to the 16-bit grid so in-memory data equals a file round trip.
render::Image quantize16(const render::Image& image);

// ---------------------------------------------------------------------------

struct LedgerEntry {
  std::string phase;
  std::string config_hash;
  std::vector<std::string> artifacts;
  std::map<std::string, double> metrics;
  double seconds = 0.0;
};

/// Appends one JSON line to <dir>/ledger.jsonl.
void append_ledger(const fs::path& dir, const LedgerEntry& entry);
std::vector<LedgerEntry> read_ledger(const fs::path& dir);

// ---------------------------------------------------------------------------

struct DatasetRecord {
  std::string image;  // path relative to the dataset directory
  PoseVector theta;
  CameraView k;
  JointSet joints;
  std::string split;
  render::Image pixels;  // loaded contents
};

struct DatasetManifest {
  std::vector<DatasetRecord> records;
  int height = 0;
  int width = 0;
  int channels = 1;
};

/// Builds a record with joints from forward kinematics.
DatasetRecord make_record(const render::Image& image, const PoseVector& theta, const CameraView& k,
                          const std::string& split);

/// Writes images/NNNNNN.png, manifest.jsonl, header.json and MANIFEST.sha.
void export_dataset(const DatasetManifest& manifest, const fs::path& dir);
/// Verifies checksums, image shapes and joint labels. `height`/`width` of
/// zero accept the header's resolution.
DatasetManifest import_dataset(const fs::path& dir, int height = 0, int width = 0);

}  // namespace posegen::io
