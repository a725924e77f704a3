#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "tsg/common.hpp"

namespace tsg::datamodel {

/// Ground-truth moment for one video/query pair. Times are seconds.
struct MomentAnnotation {
  std::string video_id;
  double start_sec = 0.0;
  double end_sec = 0.0;
  double duration_sec = 0.0;
  std::vector<std::string> query_text;

  void validate() const;
};

/// Time-major visual features with a contiguous valid-frame prefix; rows at
/// and beyond valid_frames are zero padding.
struct VideoFeatures {
  Mat features;  // T x D_in
  int valid_frames = 0;
  double duration_sec = 0.0;

  int frames() const { return static_cast<int>(features.rows()); }
  int dim() const { return static_cast<int>(features.cols()); }
  std::vector<bool> frame_mask() const;
  void validate() const;
};

/// Token-major query bundle. `features` may be empty until a text encoder
/// fills it; token ids are always present.
struct QueryFeatures {
  Mat features;  // L x D
  int valid_tokens = 0;
  std::vector<int> token_ids;

  int length() const { return static_cast<int>(token_ids.size()); }
  void validate() const;
};

// ---- token vocabulary ----

inline constexpr int kPadTokenId = 0;
inline constexpr int kMaskTokenId = 1;
inline constexpr const char* kPadToken = "<pad>";
inline constexpr const char* kMaskToken = "<mask>";

/// Line-per-token vocabulary; line number equals token id. Rows 0 and 1 are
/// reserved for the pad and mask tokens.
class Vocabulary {
 public:
  Vocabulary();
  explicit Vocabulary(const std::vector<std::string>& content_tokens);

  int id(const std::string& token) const;  // throws on unknown token
  const std::string& token(int id) const;
  bool contains(const std::string& token) const;
  int size() const { return static_cast<int>(tokens_.size()); }

  std::vector<int> encode(const std::vector<std::string>& tokens) const;

  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

// ---- timeline conventions ----
// Frame i of a T-frame video represents the time bin
// [i/T * dur, (i+1)/T * dur), with center (i + 0.5)/T * dur.

inline double frame_center_time(int i, int t_frames, double duration) {
  return (i + 0.5) / t_frames * duration;
}

/// Seconds interval covered by the inclusive frame span [i, j].
std::pair<double, double> span_to_seconds(int i, int j, int t_frames, double duration);

/// Frame index whose bin contains a span start; boundary-centered times snap
/// inward (toward the later frame).
int start_frame_for_time(double t, int t_frames, double duration);
/// Frame index for a span end; boundary times snap inward (earlier frame).
int end_frame_for_time(double t, int t_frames, double duration);

// ---- feature container ("PINF") ----
// Layout: 4 magic bytes "PINF", u32 version, u32 T, u32 D, then T*D
// little-endian 32-bit floats, row major.

void write_pinf(const std::filesystem::path& path, const Mat& features);
Mat read_pinf(const std::filesystem::path& path);

// ---- dataset manifest ----
// Line-delimited JSON; one record per video/query pair. Feature paths are
// relative to the manifest's directory.

struct ManifestRecord {
  MomentAnnotation annotation;
  std::string feature_file;
  std::vector<int> object_positions;  // indices into query_text, may be empty
};

struct LoadedPair {
  VideoFeatures video;
  MomentAnnotation annotation;
  std::vector<int> object_positions;
};

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRecord>& records);
std::vector<LoadedPair> load_dataset(const std::filesystem::path& manifest_path);

// ---- temporal resampling ----

/// Max-pool down to exactly t_target rows (window w covers raw rows
/// [floor(w*T_raw/t_target), floor((w+1)*T_raw/t_target))), or copy and
/// zero-pad when the input is short. Returns the matrix and the valid count.
std::pair<Mat, int> resample_features(const Mat& raw, int t_target);

VideoFeatures resample_video(const VideoFeatures& raw, int t_target);

// ---- synthetic corpus ----

struct SyntheticSpec {
  int num_pairs = 0;
  int T = 0;       // frames per generated video
  int D_in = 0;    // raw feature dimension
  int vocab_size = 0;  // content tokens, excluding <pad>/<mask>
  std::vector<std::string> object_vocab;
  double planted_snr = 0.0;
  uint64_t seed = 0;

  // Shape knobs with stable defaults.
  double min_span_frac = 0.15;
  double max_span_frac = 0.5;
  int query_fillers = 3;
  int caption_length = 4;

  void validate() const;
};

struct SynthSample {
  VideoFeatures video;
  MomentAnnotation annotation;
  std::vector<int> object_positions;
  /// Per-frame caption tokens the deterministic stub captioner will emit.
  std::vector<std::vector<std::string>> frame_captions;
};

struct SynthDataset {
  std::vector<SynthSample> samples;
  Vocabulary vocab;
  std::vector<std::string> object_vocab;
  /// Hidden per-token directions used to plant the signal (for tests).
  Mat token_directions;  // vocab.size() x D_in
};

/// Deterministic generator. Each pair carries a ground-truth span whose
/// frames hold `planted_snr` times a unit direction derived from the query's
/// object words, on top of unit Gaussian noise. Frame captions inside the
/// span contain the query's object words; outside they are random tokens.
SynthDataset synth_generate(const SyntheticSpec& spec);

/// Persist a synthetic dataset as manifest + PINF files + vocab + object
/// vocab + stub caption hints, so the CLI pipeline can reload it.
void write_synth_dataset(const SynthDataset& ds, const std::filesystem::path& out_dir);

/// Stub caption hints written by write_synth_dataset.
std::unordered_map<std::string, std::vector<std::vector<std::string>>> load_stub_captions(
    const std::filesystem::path& path);

}  // namespace tsg::datamodel
