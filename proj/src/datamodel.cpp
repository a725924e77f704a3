#include "tsg/datamodel.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

static_assert(std::endian::native == std::endian::little,
              "PINF I/O assumes a little-endian host");

namespace tsg::datamodel {

using nlohmann::json;

void MomentAnnotation::validate() const {
  TSG_CHECK(!video_id.empty(), "annotation: empty video_id");
  TSG_CHECK(duration_sec > 0.0, "annotation " << video_id << ": non-positive duration");
  TSG_CHECK(start_sec >= 0.0, "annotation " << video_id << ": negative start");
  TSG_CHECK(start_sec < end_sec,
            "annotation " << video_id << ": start " << start_sec << " !< end " << end_sec);
  TSG_CHECK(end_sec <= duration_sec,
            "annotation " << video_id << ": end " << end_sec << " exceeds duration " << duration_sec);
  TSG_CHECK(!query_text.empty(), "annotation " << video_id << ": empty query");
}

std::vector<bool> VideoFeatures::frame_mask() const {
  std::vector<bool> m(frames(), false);
  for (int i = 0; i < valid_frames; ++i) m[i] = true;
  return m;
}

void VideoFeatures::validate() const {
  TSG_CHECK(features.size() > 0, "video features: empty matrix");
  TSG_CHECK(all_finite(features), "video features: non-finite entries");
  TSG_CHECK(valid_frames >= 1 && valid_frames <= frames(),
            "video features: bad valid_frames " << valid_frames << " of " << frames());
  if (valid_frames < frames()) {
    TSG_CHECK(features.bottomRows(frames() - valid_frames).cwiseAbs().maxCoeff() == 0.0,
              "video features: padded rows must be zero");
  }
}

void QueryFeatures::validate() const {
  TSG_CHECK(!token_ids.empty(), "query features: no tokens");
  TSG_CHECK(valid_tokens >= 1 && valid_tokens <= length(),
            "query features: bad valid_tokens " << valid_tokens << " of " << length());
  if (features.size() > 0) {
    TSG_CHECK(features.rows() == length(), "query features: feature/token length mismatch");
    TSG_CHECK(all_finite(features), "query features: non-finite entries");
    if (valid_tokens < length()) {
      TSG_CHECK(features.bottomRows(length() - valid_tokens).cwiseAbs().maxCoeff() == 0.0,
                "query features: padded rows must be zero");
    }
  }
}

Vocabulary::Vocabulary() : Vocabulary(std::vector<std::string>{}) {}

Vocabulary::Vocabulary(const std::vector<std::string>& content_tokens) {
  tokens_ = {kPadToken, kMaskToken};
  for (const auto& t : content_tokens) tokens_.push_back(t);
  for (int i = 0; i < static_cast<int>(tokens_.size()); ++i) {
    TSG_CHECK(index_.emplace(tokens_[i], i).second, "vocabulary: duplicate token " << tokens_[i]);
  }
}

int Vocabulary::id(const std::string& token) const {
  auto it = index_.find(token);
  TSG_CHECK(it != index_.end(), "vocabulary: unknown token '" << token << "'");
  return it->second;
}

const std::string& Vocabulary::token(int id) const {
  TSG_CHECK(id >= 0 && id < size(), "vocabulary: id " << id << " out of range");
  return tokens_[id];
}

bool Vocabulary::contains(const std::string& token) const {
  return index_.find(token) != index_.end();
}

std::vector<int> Vocabulary::encode(const std::vector<std::string>& tokens) const {
  std::vector<int> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(id(t));
  return ids;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  TSG_CHECK(out.good(), "vocabulary: cannot write " << path);
  for (const auto& t : tokens_) out << t << "\n";
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  TSG_CHECK(in.good(), "vocabulary: cannot read " << path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) lines.push_back(line);
  }
  TSG_CHECK(lines.size() >= 2 && lines[0] == kPadToken && lines[1] == kMaskToken,
            "vocabulary file " << path << " must start with the reserved tokens");
  return Vocabulary(std::vector<std::string>(lines.begin() + 2, lines.end()));
}

std::pair<double, double> span_to_seconds(int i, int j, int t_frames, double duration) {
  TSG_CHECK(0 <= i && i <= j && j < t_frames, "span_to_seconds: bad span");
  return {static_cast<double>(i) / t_frames * duration,
          static_cast<double>(j + 1) / t_frames * duration};
}

int start_frame_for_time(double t, int t_frames, double duration) {
  double x = t / duration * t_frames - 0.5;
  int idx = static_cast<int>(std::floor(x + 0.5));  // ties snap to the later frame
  return std::clamp(idx, 0, t_frames - 1);
}

int end_frame_for_time(double t, int t_frames, double duration) {
  double x = t / duration * t_frames - 0.5;
  int idx = static_cast<int>(std::ceil(x - 0.5));  // ties snap to the earlier frame
  return std::clamp(idx, 0, t_frames - 1);
}

namespace {

constexpr char kPinfMagic[4] = {'P', 'I', 'N', 'F'};
constexpr uint32_t kPinfVersion = 1;

void write_u32(std::ostream& out, uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

uint32_t read_u32(std::istream& in) {
  uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}

}  // namespace

void write_pinf(const std::filesystem::path& path, const Mat& features) {
  TSG_CHECK(features.size() > 0, "write_pinf: empty matrix");
  std::ofstream out(path, std::ios::binary);
  TSG_CHECK(out.good(), "write_pinf: cannot open " << path);
  out.write(kPinfMagic, 4);
  write_u32(out, kPinfVersion);
  write_u32(out, static_cast<uint32_t>(features.rows()));
  write_u32(out, static_cast<uint32_t>(features.cols()));
  std::vector<float> row(features.cols());
  for (Eigen::Index r = 0; r < features.rows(); ++r) {
    for (Eigen::Index c = 0; c < features.cols(); ++c) row[c] = static_cast<float>(features(r, c));
    out.write(reinterpret_cast<const char*>(row.data()),
              static_cast<std::streamsize>(row.size() * sizeof(float)));
  }
  TSG_CHECK(out.good(), "write_pinf: write failed for " << path);
}

Mat read_pinf(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  TSG_CHECK(in.good(), "read_pinf: cannot open " << path);
  char magic[4];
  in.read(magic, 4);
  TSG_CHECK(in.good() && std::memcmp(magic, kPinfMagic, 4) == 0,
            "read_pinf: " << path << " is not a PINF file");
  uint32_t version = read_u32(in);
  TSG_CHECK(version == kPinfVersion, "read_pinf: unsupported version " << version);
  uint32_t t = read_u32(in), d = read_u32(in);
  TSG_CHECK(in.good() && t > 0 && d > 0, "read_pinf: corrupt header in " << path);
  Mat m(t, d);
  std::vector<float> row(d);
  for (uint32_t r = 0; r < t; ++r) {
    in.read(reinterpret_cast<char*>(row.data()),
            static_cast<std::streamsize>(row.size() * sizeof(float)));
    TSG_CHECK(in.good(), "read_pinf: truncated data in " << path);
    for (uint32_t c = 0; c < d; ++c) m(r, c) = row[c];
  }
  TSG_CHECK(all_finite(m), "read_pinf: non-finite values in " << path);
  return m;
}

void write_manifest(const std::filesystem::path& path,
                    const std::vector<ManifestRecord>& records) {
  std::ofstream out(path);
  TSG_CHECK(out.good(), "write_manifest: cannot open " << path);
  for (const auto& r : records) {
    json j;
    j["video_id"] = r.annotation.video_id;
    j["feature_file"] = r.feature_file;
    j["start_sec"] = r.annotation.start_sec;
    j["end_sec"] = r.annotation.end_sec;
    j["duration_sec"] = r.annotation.duration_sec;
    j["query"] = r.annotation.query_text;
    if (!r.object_positions.empty()) j["object_positions"] = r.object_positions;
    out << j.dump() << "\n";
  }
}

std::vector<LoadedPair> load_dataset(const std::filesystem::path& manifest_path) {
  std::ifstream in(manifest_path);
  TSG_CHECK(in.good(), "load_dataset: cannot open manifest " << manifest_path);
  std::filesystem::path base = manifest_path.parent_path();

  std::vector<LoadedPair> out;
  std::string line;
  int index = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const std::exception& e) {
      throw Error("load_dataset: record " + std::to_string(index) + ": bad JSON: " + e.what());
    }
    LoadedPair pair;
    std::string feature_file;
    try {
      pair.annotation.video_id = j.at("video_id").get<std::string>();
      pair.annotation.start_sec = j.at("start_sec").get<double>();
      pair.annotation.end_sec = j.at("end_sec").get<double>();
      pair.annotation.duration_sec = j.at("duration_sec").get<double>();
      pair.annotation.query_text = j.at("query").get<std::vector<std::string>>();
      feature_file = j.at("feature_file").get<std::string>();
      if (j.contains("object_positions"))
        pair.object_positions = j.at("object_positions").get<std::vector<int>>();
    } catch (const json::exception& e) {
      throw Error("load_dataset: record " + std::to_string(index) + ": " + e.what());
    }
    try {
      pair.annotation.validate();
    } catch (const Error& e) {
      throw Error("load_dataset: record " + std::to_string(index) + ": " + e.what());
    }
    std::filesystem::path fpath = base / feature_file;
    TSG_CHECK(std::filesystem::exists(fpath),
              "load_dataset: record " << index << ": missing feature file " << fpath);
    pair.video.features = read_pinf(fpath);
    pair.video.valid_frames = pair.video.frames();
    pair.video.duration_sec = pair.annotation.duration_sec;
    pair.video.validate();
    out.push_back(std::move(pair));
    ++index;
  }
  return out;
}

std::pair<Mat, int> resample_features(const Mat& raw, int t_target) {
  TSG_CHECK(raw.size() > 0, "resample_features: empty input");
  TSG_CHECK(t_target >= 1, "resample_features: t_target must be positive");
  const int t_raw = static_cast<int>(raw.rows());
  if (t_raw <= t_target) {
    Mat out = Mat::Zero(t_target, raw.cols());
    out.topRows(t_raw) = raw;
    return {out, t_raw};
  }
  Mat out(t_target, raw.cols());
  for (int w = 0; w < t_target; ++w) {
    int lo = static_cast<int>(static_cast<int64_t>(w) * t_raw / t_target);
    int hi = static_cast<int>(static_cast<int64_t>(w + 1) * t_raw / t_target);
    out.row(w) = raw.middleRows(lo, hi - lo).colwise().maxCoeff();
  }
  return {out, t_target};
}

VideoFeatures resample_video(const VideoFeatures& raw, int t_target) {
  TSG_CHECK(raw.valid_frames == raw.frames(),
            "resample_video expects unpadded input features");
  auto [feat, valid] = resample_features(raw.features, t_target);
  VideoFeatures out;
  out.features = std::move(feat);
  out.valid_frames = valid;
  out.duration_sec = raw.duration_sec;
  return out;
}

void SyntheticSpec::validate() const {
  TSG_CHECK(num_pairs > 0, "synthetic spec: num_pairs must be positive");
  TSG_CHECK(T > 0, "synthetic spec: T must be positive");
  TSG_CHECK(D_in > 0, "synthetic spec: D_in must be positive");
  TSG_CHECK(vocab_size > 0, "synthetic spec: vocab_size must be positive");
  TSG_CHECK(planted_snr >= 0.0, "synthetic spec: planted_snr must be non-negative");
  TSG_CHECK(static_cast<int>(object_vocab.size()) <= vocab_size,
            "synthetic spec: object vocabulary (" << object_vocab.size()
                                                  << " tokens) exceeds vocab_size " << vocab_size);
  TSG_CHECK(!object_vocab.empty(), "synthetic spec: object vocabulary must not be empty");
  TSG_CHECK(min_span_frac > 0.0 && min_span_frac <= max_span_frac && max_span_frac <= 1.0,
            "synthetic spec: bad span fractions");
}

namespace {

Mat unit_rows(Rng& rng, int rows, int cols) {
  Mat m(rows, cols);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) m(r, c) = rng.normal();
    double n = m.row(r).norm();
    if (n > 0) m.row(r) /= n;
  }
  return m;
}

}  // namespace

SynthDataset synth_generate(const SyntheticSpec& spec) {
  spec.validate();

  SynthDataset ds;
  std::vector<std::string> content;
  content.reserve(spec.vocab_size);
  // Object words come first so their ids are stable, fillers follow.
  std::vector<std::string> fillers;
  for (const auto& w : spec.object_vocab) content.push_back(w);
  for (int i = static_cast<int>(spec.object_vocab.size()); i < spec.vocab_size; ++i) {
    fillers.push_back("w" + std::to_string(i));
    content.push_back(fillers.back());
  }
  TSG_CHECK(!fillers.empty(), "synthetic spec: need at least one non-object token");
  ds.vocab = Vocabulary(content);
  ds.object_vocab = spec.object_vocab;

  Rng root(spec.seed);
  Rng dir_rng = root.fork(1);
  ds.token_directions = unit_rows(dir_rng, ds.vocab.size(), spec.D_in);

  for (int p = 0; p < spec.num_pairs; ++p) {
    Rng rng = Rng(seed_mix(spec.seed, 1000 + p));
    SynthSample s;
    std::string vid = "synth" + std::to_string(p);

    // Query: fillers with one object word inserted at a random position.
    const std::string& obj =
        spec.object_vocab[rng.uniform_int(spec.object_vocab.size())];
    std::vector<std::string> query;
    for (int i = 0; i < spec.query_fillers; ++i)
      query.push_back(fillers[rng.uniform_int(fillers.size())]);
    int obj_pos = static_cast<int>(rng.uniform_int(query.size() + 1));
    query.insert(query.begin() + obj_pos, obj);
    s.object_positions.clear();
    for (int i = 0; i < static_cast<int>(query.size()); ++i) {
      for (const auto& ow : spec.object_vocab)
        if (query[i] == ow) s.object_positions.push_back(i);
    }

    // Span, aligned to frame bins (1 second per frame).
    int min_len = std::max(1, static_cast<int>(spec.min_span_frac * spec.T));
    int max_len = std::max(min_len, static_cast<int>(spec.max_span_frac * spec.T));
    int len = min_len + static_cast<int>(rng.uniform_int(max_len - min_len + 1));
    int start = static_cast<int>(rng.uniform_int(spec.T - len + 1));
    int end = start + len - 1;

    s.annotation.video_id = vid;
    s.annotation.duration_sec = spec.T;
    s.annotation.start_sec = start;
    s.annotation.end_sec = end + 1;
    s.annotation.query_text = query;
    s.annotation.validate();

    // Features: unit noise plus the planted direction inside the span.
    Mat feat(spec.T, spec.D_in);
    for (int r = 0; r < spec.T; ++r)
      for (int c = 0; c < spec.D_in; ++c) feat(r, c) = rng.normal();
    if (spec.planted_snr > 0.0) {
      Eigen::RowVectorXd dir = Eigen::RowVectorXd::Zero(spec.D_in);
      for (int pos : s.object_positions) dir += ds.token_directions.row(ds.vocab.id(query[pos]));
      double n = dir.norm();
      TSG_CHECK(n > 0.0, "synth_generate: degenerate planted direction");
      dir /= n;
      for (int r = start; r <= end; ++r) feat.row(r) += spec.planted_snr * dir;
    }
    s.video.features = std::move(feat);
    s.video.valid_frames = spec.T;
    s.video.duration_sec = spec.T;
    s.video.validate();

    // Frame captions for the stub captioner: the query's object words inside
    // the span, unrelated tokens elsewhere.
    s.frame_captions.resize(spec.T);
    for (int f = 0; f < spec.T; ++f) {
      Rng crng = Rng(seed_mix(seed_mix(spec.seed, fnv1a(vid)), 7000 + f));
      std::vector<std::string>& cap = s.frame_captions[f];
      if (f >= start && f <= end) {
        cap.push_back(obj);
        while (static_cast<int>(cap.size()) < spec.caption_length)
          cap.push_back(fillers[crng.uniform_int(fillers.size())]);
      } else {
        while (static_cast<int>(cap.size()) < spec.caption_length)
          cap.push_back(content[crng.uniform_int(content.size())]);
      }
    }

    ds.samples.push_back(std::move(s));
  }
  return ds;
}

void write_synth_dataset(const SynthDataset& ds, const std::filesystem::path& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir / "features");
  std::vector<ManifestRecord> records;
  for (const auto& s : ds.samples) {
    std::string rel = "features/" + s.annotation.video_id + ".pinf";
    write_pinf(out_dir / rel, s.video.features);
    ManifestRecord r;
    r.annotation = s.annotation;
    r.feature_file = rel;
    r.object_positions = s.object_positions;
    records.push_back(std::move(r));
  }
  write_manifest(out_dir / "manifest.jsonl", records);
  ds.vocab.save(out_dir / "vocab.txt");
  {
    std::ofstream out(out_dir / "object_vocab.txt");
    TSG_CHECK(out.good(), "write_synth_dataset: cannot write object vocab");
    for (const auto& w : ds.object_vocab) out << w << "\n";
  }
  {
    std::ofstream out(out_dir / "stub_captions.jsonl");
    TSG_CHECK(out.good(), "write_synth_dataset: cannot write stub captions");
    for (const auto& s : ds.samples) {
      json j;
      j["video_id"] = s.annotation.video_id;
      j["captions"] = s.frame_captions;
      out << j.dump() << "\n";
    }
  }
}

std::unordered_map<std::string, std::vector<std::vector<std::string>>> load_stub_captions(
    const std::filesystem::path& path) {
  std::ifstream in(path);
  TSG_CHECK(in.good(), "load_stub_captions: cannot open " << path);
  std::unordered_map<std::string, std::vector<std::vector<std::string>>> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    out[j.at("video_id").get<std::string>()] =
        j.at("captions").get<std::vector<std::vector<std::string>>>();
  }
  return out;
}

}  // namespace tsg::datamodel
