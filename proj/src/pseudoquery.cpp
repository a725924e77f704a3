#include "tsg/pseudoquery.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <httplib.h>
#include <json.hpp>

namespace tsg::pseudoquery {

using nlohmann::json;

void PseudoQuerySet::validate(const std::set<std::string>& object_vocab) const {
  size_t total = 0;
  for (size_t i = 0; i < selected.size(); ++i) {
    TSG_CHECK(selected[i].scored, "pseudo-query set: unscored caption in selection");
    if (i > 0)
      TSG_CHECK(selected[i - 1].similarity_to_gt >= selected[i].similarity_to_gt,
                "pseudo-query set: selection not score-descending");
    total += selected[i].tokens.size();
  }
  TSG_CHECK(total == concat_tokens.size(), "pseudo-query set: concat length mismatch");
  TSG_CHECK(num_masked == static_cast<int>(mask_positions.size()),
            "pseudo-query set: num_masked inconsistent");
  for (size_t i = 0; i < mask_positions.size(); ++i) {
    TSG_CHECK(mask_positions[i] >= 0 && mask_positions[i] < static_cast<int>(concat_tokens.size()),
              "pseudo-query set: mask position out of range");
    if (i > 0)
      TSG_CHECK(mask_positions[i - 1] < mask_positions[i],
                "pseudo-query set: mask positions not strictly sorted");
    TSG_CHECK(concat_tokens[mask_positions[i]] == datamodel::kMaskToken,
              "pseudo-query set: mask position does not hold the mask token");
  }
  (void)object_vocab;
}

std::vector<std::string> StubCaptioner::caption(const std::string& video_id, int frame_index) {
  auto it = tables_.find(video_id);
  TSG_CHECK(it != tables_.end(), "stub captioner: unknown video " << video_id);
  TSG_CHECK(frame_index >= 0 && frame_index < static_cast<int>(it->second.size()),
            "stub captioner: frame " << frame_index << " out of range for " << video_id);
  return it->second[frame_index];
}

HttpCaptioner::HttpCaptioner(const std::string& url, int timeout_sec)
    : timeout_sec_(timeout_sec) {
  std::string rest;
  if (url.rfind("http://", 0) == 0) {
    rest = url.substr(7);
  } else {
    throw Error("HttpCaptioner: only http:// endpoints are supported, got " + url);
  }
  auto slash = rest.find('/');
  std::string hostport = slash == std::string::npos ? rest : rest.substr(0, slash);
  path_ = slash == std::string::npos ? "/" : rest.substr(slash);
  auto colon = hostport.find(':');
  if (colon == std::string::npos) {
    host_ = hostport;
    port_ = 80;
  } else {
    host_ = hostport.substr(0, colon);
    port_ = std::stoi(hostport.substr(colon + 1));
  }
  TSG_CHECK(!host_.empty(), "HttpCaptioner: empty host in " << url);
}

std::vector<std::string> HttpCaptioner::caption(const std::string& video_id, int frame_index) {
  httplib::Client client(host_, port_);
  client.set_connection_timeout(timeout_sec_);
  client.set_read_timeout(timeout_sec_);
  json req;
  req["video_id"] = video_id;
  req["frame_index"] = frame_index;
  auto res = client.Post(path_, req.dump(), "application/json");
  TSG_CHECK(res, "captioning endpoint unreachable at " << host_ << ":" << port_);
  TSG_CHECK(res->status == 200, "captioning endpoint returned status " << res->status);
  json body;
  try {
    body = json::parse(res->body);
  } catch (const std::exception& e) {
    throw Error(std::string("captioning endpoint returned invalid JSON: ") + e.what());
  }
  TSG_CHECK(body.contains("text"), "captioning endpoint response lacks 'text'");
  std::istringstream iss(body["text"].get<std::string>());
  std::vector<std::string> tokens;
  std::string tok;
  while (iss >> tok) tokens.push_back(tok);
  TSG_CHECK(!tokens.empty(), "captioning endpoint returned an empty caption");
  return tokens;
}

std::vector<FrameCaption> caption_frames(const datamodel::VideoFeatures& video,
                                         const std::string& video_id, int f_count,
                                         CaptionerInterface& captioner) {
  TSG_CHECK(f_count >= 1, "caption_frames: F must be >= 1");
  const int t = video.valid_frames;
  std::vector<FrameCaption> out;
  out.reserve(f_count);
  for (int f = 0; f < f_count; ++f) {
    int idx = static_cast<int>(static_cast<int64_t>(f) * t / f_count);
    FrameCaption fc;
    fc.frame_index = idx;
    try {
      fc.tokens = captioner.caption(video_id, idx);
    } catch (const std::exception& e) {
      throw Error("caption_frames: captioner failed at frame " + std::to_string(idx) + ": " +
                  e.what());
    }
    TSG_CHECK(!fc.tokens.empty(), "caption_frames: empty caption at frame " << idx);
    out.push_back(std::move(fc));
  }
  return out;
}

namespace {

Eigen::RowVectorXd mean_pooled(const TextEmbedder& embedder,
                               const std::vector<std::string>& tokens) {
  Mat e = embedder.embed_tokens(tokens);
  TSG_CHECK(e.rows() == static_cast<Eigen::Index>(tokens.size()),
            "text embedder returned wrong row count");
  return e.colwise().mean();
}

double cosine(const Eigen::RowVectorXd& a, const Eigen::RowVectorXd& b) {
  double na = a.norm(), nb = b.norm();
  TSG_CHECK(na > 0.0 && nb > 0.0, "cosine: zero-norm pooled embedding");
  return a.dot(b) / (na * nb);
}

}  // namespace

PseudoQuerySet score_and_select_topk(std::vector<FrameCaption> captions,
                                     const std::vector<std::string>& gt_query_tokens,
                                     const TextEmbedder& embedder, int k) {
  TSG_CHECK(k >= 1, "score_and_select_topk: K must be >= 1");
  TSG_CHECK(!captions.empty(), "score_and_select_topk: no captions");
  TSG_CHECK(!gt_query_tokens.empty(), "score_and_select_topk: empty ground-truth query");

  Eigen::RowVectorXd q = mean_pooled(embedder, gt_query_tokens);
  for (auto& c : captions) {
    c.similarity_to_gt = cosine(mean_pooled(embedder, c.tokens), q);
    c.scored = true;
  }
  std::stable_sort(captions.begin(), captions.end(), [](const FrameCaption& a,
                                                        const FrameCaption& b) {
    if (a.similarity_to_gt != b.similarity_to_gt) return a.similarity_to_gt > b.similarity_to_gt;
    return a.frame_index < b.frame_index;
  });

  PseudoQuerySet out;
  size_t keep = std::min<size_t>(k, captions.size());
  out.selected.assign(captions.begin(), captions.begin() + keep);
  for (const auto& c : out.selected)
    out.concat_tokens.insert(out.concat_tokens.end(), c.tokens.begin(), c.tokens.end());
  return out;
}

PseudoQuerySet mask_object_words(const PseudoQuerySet& pqs,
                                 const std::set<std::string>& object_vocab, double m_percent,
                                 uint64_t rng_seed) {
  TSG_CHECK(m_percent >= 0.0 && m_percent <= 100.0,
            "mask_object_words: M% outside [0, 100]: " << m_percent);
  std::vector<int> object_positions;
  for (int i = 0; i < pqs.concat_length(); ++i)
    if (object_vocab.count(pqs.concat_tokens[i])) object_positions.push_back(i);

  // Round half up.
  int n_mask = static_cast<int>(
      std::floor(m_percent / 100.0 * static_cast<double>(object_positions.size()) + 0.5));

  PseudoQuerySet out = pqs;
  out.mask_positions.clear();
  out.num_masked = n_mask;
  if (n_mask == 0) return out;

  Rng rng(rng_seed);
  rng.shuffle(object_positions);
  out.mask_positions.assign(object_positions.begin(), object_positions.begin() + n_mask);
  std::sort(out.mask_positions.begin(), out.mask_positions.end());
  for (int pos : out.mask_positions) out.concat_tokens[pos] = datamodel::kMaskToken;
  return out;
}

void save_cache(const std::filesystem::path& path, const CaptionCache& cache) {
  std::ofstream out(path);
  TSG_CHECK(out.good(), "save_cache: cannot open " << path);
  // Sort keys so the file is reproducible.
  std::vector<std::string> keys;
  for (const auto& [k, v] : cache) keys.push_back(k);
  std::sort(keys.begin(), keys.end());
  for (const auto& k : keys) {
    json caps = json::array();
    for (const auto& c : cache.at(k)) {
      json jc;
      jc["frame_index"] = c.frame_index;
      jc["tokens"] = c.tokens;
      if (c.scored) jc["score"] = c.similarity_to_gt;
      caps.push_back(std::move(jc));
    }
    json j;
    j["video_id"] = k;
    j["captions"] = std::move(caps);
    out << j.dump() << "\n";
  }
}

CaptionCache load_cache(const std::filesystem::path& path) {
  std::ifstream in(path);
  TSG_CHECK(in.good(), "load_cache: cannot open " << path);
  CaptionCache cache;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    std::vector<FrameCaption> caps;
    for (const auto& jc : j.at("captions")) {
      FrameCaption c;
      c.frame_index = jc.at("frame_index").get<int>();
      c.tokens = jc.at("tokens").get<std::vector<std::string>>();
      if (jc.contains("score")) {
        c.similarity_to_gt = jc.at("score").get<double>();
        c.scored = true;
      }
      caps.push_back(std::move(c));
    }
    cache[j.at("video_id").get<std::string>()] = std::move(caps);
  }
  return cache;
}

std::set<std::string> load_object_vocab(const std::filesystem::path& path) {
  std::ifstream in(path);
  TSG_CHECK(in.good(), "load_object_vocab: cannot open " << path);
  std::set<std::string> out;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.insert(line);
  return out;
}

}  // namespace tsg::pseudoquery
