#pragma once

#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "tsg/model.hpp"

namespace tsg::harness {

struct TrainConfig {
  int epochs = 50;
  int batch_size = 16;
  double learning_rate = 5e-4;
  double grad_clip_norm = 1.0;
  uint64_t seed = 0;
  objectives::LossWeights loss_weights;
  int K = 3;                // pseudo-queries kept per pair
  double M_percent = 30.0;  // object-word masking
  int N_prompt = 2;
  int pool_size = 20;
  int T = 128;
  int D = 128;

  // Architecture and schedule knobs.
  int num_heads = 8;
  int num_layers = 1;
  double dropout = 0.2;
  int embed_dim_in = 300;
  int F_frames = 16;  // frames captioned per video
  std::string lr_schedule = "linear";  // linear | constant | cosine
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double train_fraction = 0.8;  // seed-stable hash split
  bool use_pin = true;
  bool use_prompt = true;
  double key_pull_weight = 0.1;
  double decode_gamma = 1.0;
  double extend_ratio = 0.25;
  double t_min = 0.5;
  double t_max = 1.0;
  int max_mask_slots = 64;
  int full_enum_max_t = 64;
  int threads = 2;

  void validate() const;
};

std::string to_json(const TrainConfig& cfg);
TrainConfig config_from_json(const std::string& text);
TrainConfig load_config_file(const std::filesystem::path& path);

/// Everything a run needs from disk (or from an in-memory synthetic corpus).
struct DataBundle {
  std::vector<datamodel::LoadedPair> pairs;  // raw, unresampled
  datamodel::Vocabulary vocab;
  std::set<std::string> object_vocab;
  pseudoquery::StubCaptioner::Tables stub_tables;  // per-frame caption hints
  pseudoquery::CaptionCache cache;                 // optional pre-scored captions
};

DataBundle load_bundle(const std::filesystem::path& dataset_dir,
                       const std::filesystem::path& cache_path = {});
DataBundle bundle_from_synth(const datamodel::SynthDataset& ds);

// ---- metrics ----

/// Interval IoU in seconds; inverted intervals are rejected, equal
/// zero-length intervals count as 1.
double iou(std::pair<double, double> a, std::pair<double, double> b);

/// Percentage of samples with IoU strictly greater than m.
double recall_at_iou(const std::vector<double>& ious, double m);

struct EvalResult {
  std::map<double, double> iou_at;  // threshold -> percentage
  struct PerSample {
    std::string video_id;
    double pred_start = 0, pred_end = 0;
    double gt_start = 0, gt_end = 0;
    double iou = 0;
    int retrieved_entry = -1;
  };
  std::vector<PerSample> per_sample;
  std::map<int, int> retrieval_histogram;
};

struct MetricsRow {
  int epoch = 0;
  double l_pre = 0, l_bound = 0, l_con = 0, l_key = 0, total = 0;
  double iou_03 = 0, iou_05 = 0, iou_07 = 0;
};

struct TrainResult {
  std::vector<MetricsRow> history;
  std::filesystem::path checkpoint_path;
  std::vector<int> train_indices;  // indices into the bundle's pairs
  std::vector<int> val_indices;
  /// Retrieval entry used per train sample during the final epoch.
  std::map<std::string, int> last_train_retrieval;
};

/// Preprocessed samples plus the model, shared by train and evaluate.
struct Session {
  model::GroundingModel net;
  std::vector<model::Sample> samples;
  std::vector<int> train_indices, val_indices;
  TrainConfig cfg;

  explicit Session(model::ModelConfig mc) : net(mc) {}
};

/// Build the model, preprocess every pair (resample, tokenize, caption,
/// select top-K pseudo-queries) and split train/val by seed-stable id hash.
/// Pseudo-query preparation is skipped when for_training is false (inference
/// needs none).
std::unique_ptr<Session> prepare(const TrainConfig& cfg, const DataBundle& bundle,
                                 bool for_training = true);

struct TrainOptions {
  bool write_outputs = true;        // metrics.csv + checkpoint per epoch
  double stop_at_train_iou07 = -1;  // early stop threshold, disabled when < 0
  bool quiet = false;
};

TrainResult train(Session& session, const DataBundle& bundle,
                  const std::filesystem::path& out_dir, const TrainOptions& opts = {});

/// Inference over the given sample indices (no pseudo-queries).
EvalResult evaluate(Session& session, const std::vector<int>& indices);

// ---- checkpoints ----

void save_checkpoint(const std::filesystem::path& path, const model::GroundingModel& net,
                     const TrainConfig& cfg);

struct Checkpoint {
  TrainConfig cfg;
  model::ModelConfig model_cfg;
  std::vector<std::pair<std::string, Mat>> params;
};

Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Restore checkpoint parameters into a model; shapes must match.
void restore_params(model::GroundingModel& net, const Checkpoint& ck);

model::ModelConfig model_config_from(const TrainConfig& cfg, int vocab_size, int d_in);

void write_metrics_csv(const std::filesystem::path& path,
                       const std::vector<MetricsRow>& history);
void write_eval_csv(const std::filesystem::path& path, const EvalResult& result);

/// CLI entry point: synth / pseudogen / train / eval / plot subcommands.
int cli(int argc, char** argv);

}  // namespace tsg::harness
