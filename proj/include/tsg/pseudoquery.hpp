#pragma once

#include <filesystem>
#include <memory>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "tsg/common.hpp"
#include "tsg/datamodel.hpp"

namespace tsg::pseudoquery {

/// One frame-level caption. `similarity_to_gt` is defined only after
/// scoring (`scored` flips to true).
struct FrameCaption {
  int frame_index = -1;
  std::vector<std::string> tokens;
  double similarity_to_gt = 0.0;
  bool scored = false;
};

/// Top-K captions selected by similarity, concatenated in score-descending
/// order. mask_positions index into concat_tokens and always point at
/// object-word positions.
struct PseudoQuerySet {
  std::vector<FrameCaption> selected;
  std::vector<std::string> concat_tokens;
  std::vector<int> mask_positions;  // sorted ascending
  int num_masked = 0;

  int concat_length() const { return static_cast<int>(concat_tokens.size()); }
  void validate(const std::set<std::string>& object_vocab) const;
};

/// Produces a caption for one frame of one video.
class CaptionerInterface {
 public:
  virtual ~CaptionerInterface() = default;
  virtual std::vector<std::string> caption(const std::string& video_id, int frame_index) = 0;
};

/// Deterministic captioner backed by per-frame token tables (the synthetic
/// generator's planted captions).
class StubCaptioner : public CaptionerInterface {
 public:
  using Tables = std::unordered_map<std::string, std::vector<std::vector<std::string>>>;
  explicit StubCaptioner(Tables tables) : tables_(std::move(tables)) {}

  std::vector<std::string> caption(const std::string& video_id, int frame_index) override;

 private:
  Tables tables_;
};

/// Client for an external captioning endpoint. Request body is JSON
/// {"video_id": ..., "frame_index": ...}; the response is {"text": "..."}
/// and is tokenized on whitespace.
class HttpCaptioner : public CaptionerInterface {
 public:
  /// url like "http://127.0.0.1:8080/caption"
  explicit HttpCaptioner(const std::string& url, int timeout_sec = 10);

  std::vector<std::string> caption(const std::string& video_id, int frame_index) override;

 private:
  std::string host_;
  int port_ = 80;
  std::string path_;
  int timeout_sec_;
};

/// Embeds caption tokens for similarity scoring (the pre-trained language
/// model slot; desk scale backs it with the embedding table).
class TextEmbedder {
 public:
  virtual ~TextEmbedder() = default;
  virtual Mat embed_tokens(const std::vector<std::string>& tokens) const = 0;  // L x De
};

/// Uniformly sample F frames of the valid prefix and caption each one;
/// frame f maps to index floor(f*T/F). A captioner failure aborts with the
/// offending frame index, no partial result.
std::vector<FrameCaption> caption_frames(const datamodel::VideoFeatures& video,
                                         const std::string& video_id, int f_count,
                                         CaptionerInterface& captioner);

/// Score every caption against the ground-truth query (cosine of mean-pooled
/// embeddings) and keep the K best; ties break toward the lower frame index.
PseudoQuerySet score_and_select_topk(std::vector<FrameCaption> captions,
                                     const std::vector<std::string>& gt_query_tokens,
                                     const TextEmbedder& embedder, int k);

/// Replace round(M% of object-word positions) with the mask token, sampling
/// without replacement from the object positions in concat_tokens.
PseudoQuerySet mask_object_words(const PseudoQuerySet& pqs,
                                 const std::set<std::string>& object_vocab, double m_percent,
                                 uint64_t rng_seed);

// ---- pseudo-query cache (line-delimited JSON) ----

using CaptionCache = std::unordered_map<std::string, std::vector<FrameCaption>>;

void save_cache(const std::filesystem::path& path, const CaptionCache& cache);
CaptionCache load_cache(const std::filesystem::path& path);

std::set<std::string> load_object_vocab(const std::filesystem::path& path);

}  // namespace tsg::pseudoquery
