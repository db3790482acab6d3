#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mcg/harness.hpp"

namespace mcg {

// Raised for malformed or unreadable artifact files.
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor container: "MCT1" magic, u32 rank, u32 extents, then f64 payload,
// everything little-endian, data row-major.
std::vector<unsigned char> tensor_to_bytes(const Tensor& t);
Tensor tensor_from_bytes(const unsigned char* data, std::size_t len);
void write_tensor(const std::string& path, const Tensor& t);
Tensor read_tensor(const std::string& path);

// 8-bit binary PGM, min-max scaled to [0, 255]. Reading maps back to [0,1].
void write_pgm(const std::string& path, const Map2D& m);
Map2D read_pgm(const std::string& path);

// 8-bit RGB PNG; values in [0,1] map linearly to [0,255].
void write_png_rgb(const std::string& path, const Tensor& image);
Tensor read_png_rgb(const std::string& path);

std::string base64_encode(const unsigned char* data, std::size_t len);
std::vector<unsigned char> base64_decode(const std::string& text);

// Order-stable hash of every parameter tensor; identifies the base model an
// adapter was trained against.
std::uint64_t params_fingerprint(const DenoiserParams& params);

void save_adapter(const std::string& path, const ConceptAdapter& adapter,
                  std::uint64_t world_fingerprint);

struct LoadedAdapter {
    ConceptAdapter adapter;
    std::uint64_t world_fingerprint = 0;
};

LoadedAdapter load_adapter(const std::string& path);

// Scene-dataset directory: NNN.png + NNN.mask.pgm per sample plus a meta
// file carrying the caption and trigger word.
void save_dataset(const std::string& dir, const std::vector<GroundedSample>& samples,
                  const Vocabulary& vocab, const std::string& concept_name,
                  const std::string& trigger);
std::vector<GroundedSample> load_dataset(const std::string& dir, const Vocabulary& vocab);

// Line-delimited JSON logs.
void save_trace(const std::string& path, const RunTrace& trace);
void save_metrics(const std::string& path, const RunEvaluation& eval,
                  const std::vector<std::string>& concept_names);
void save_loss_curve(const std::string& path, const TrainStats& stats);

}  // namespace mcg
