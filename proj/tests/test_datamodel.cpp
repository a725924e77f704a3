#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "testutil.hpp"
#include "tsg/datamodel.hpp"

using namespace tsg;
using namespace tsg::datamodel;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
  fs::path p = fs::temp_directory_path() / ("tsg_test_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("pinf round trip preserves float32 payload") {
  Rng rng(1);
  Mat m = tsgtest::random_mat(rng, 7, 5);
  // Quantize to float32 so equality after the round trip is exact.
  for (int r = 0; r < 7; ++r)
    for (int c = 0; c < 5; ++c) m(r, c) = static_cast<float>(m(r, c));
  fs::path dir = temp_dir("pinf");
  write_pinf(dir / "a.pinf", m);
  Mat back = read_pinf(dir / "a.pinf");
  CHECK((back - m).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("read_pinf rejects garbage") {
  fs::path dir = temp_dir("pinf_bad");
  { std::ofstream(dir / "bad.pinf") << "not a feature file"; }
  CHECK_THROWS_AS(read_pinf(dir / "bad.pinf"), Error);
  CHECK_THROWS_AS(read_pinf(dir / "missing.pinf"), Error);
}

TEST_CASE("resample: downsample max-pools non-overlapping windows") {
  Mat raw(2, 2);
  raw << 1, 5, 3, 2;
  auto [out, valid] = resample_features(raw, 1);
  CHECK(valid == 1);
  CHECK(out(0, 0) == 3.0);
  CHECK(out(0, 1) == 5.0);
}

TEST_CASE("resample: identity at equal length, zero-pad when short") {
  Rng rng(2);
  Mat raw = tsgtest::random_mat(rng, 128, 4);
  auto [same, valid_same] = resample_features(raw, 128);
  CHECK(valid_same == 128);
  CHECK((same - raw).cwiseAbs().maxCoeff() == 0.0);

  auto [padded, valid_pad] = resample_features(raw.topRows(10), 16);
  CHECK(valid_pad == 10);
  CHECK((padded.topRows(10) - raw.topRows(10)).cwiseAbs().maxCoeff() == 0.0);
  CHECK(padded.bottomRows(6).cwiseAbs().maxCoeff() == 0.0);

  auto [down, valid_down] = resample_features(tsgtest::random_mat(rng, 300, 3), 128);
  CHECK(valid_down == 128);
  CHECK(down.rows() == 128);
}

TEST_CASE("resample: windows cover every raw frame and match brute force") {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    int t_raw = 2 + static_cast<int>(rng.uniform_int(30));
    int t_target = 1 + static_cast<int>(rng.uniform_int(static_cast<uint64_t>(t_raw)));
    int d = 1 + static_cast<int>(rng.uniform_int(4));
    Mat raw = tsgtest::random_mat(rng, t_raw, d);
    auto [out, valid] = resample_features(raw, t_target);
    CHECK(valid == t_target);
    for (int w = 0; w < t_target; ++w) {
      int lo = static_cast<int>(static_cast<int64_t>(w) * t_raw / t_target);
      int hi = static_cast<int>(static_cast<int64_t>(w + 1) * t_raw / t_target);
      REQUIRE(hi > lo);
      for (int c = 0; c < d; ++c) {
        double mx = -1e300, mean = 0.0;
        for (int r = lo; r < hi; ++r) {
          mx = std::max(mx, raw(r, c));
          mean += raw(r, c);
        }
        mean /= (hi - lo);
        CHECK(out(w, c) == mx);
        CHECK(out(w, c) >= mean);
      }
    }
  }
}

TEST_CASE("resample rejects empty input") {
  CHECK_THROWS_AS(resample_features(Mat(), 4), Error);
}

TEST_CASE("timeline mapping: whole video and bin-aligned spans") {
  int t = 10;
  double dur = 40.0;
  CHECK(start_frame_for_time(0.0, t, dur) == 0);
  CHECK(end_frame_for_time(dur, t, dur) == t - 1);
  // Frame span [2, 5] covers seconds [8, 24]; mapping back recovers it.
  auto [lo, hi] = span_to_seconds(2, 5, t, dur);
  CHECK(lo == doctest::Approx(8.0));
  CHECK(hi == doctest::Approx(24.0));
  CHECK(start_frame_for_time(lo, t, dur) == 2);
  CHECK(end_frame_for_time(hi, t, dur) == 5);
  // Centers map to their own frame.
  for (int i = 0; i < t; ++i) {
    double c = frame_center_time(i, t, dur);
    CHECK(start_frame_for_time(c, t, dur) == i);
    CHECK(end_frame_for_time(c, t, dur) == i);
  }
}

TEST_CASE("manifest round trip and validation errors") {
  fs::path dir = temp_dir("manifest");
  Rng rng(4);

  std::vector<ManifestRecord> recs;
  for (int i = 0; i < 3; ++i) {
    Mat feat = tsgtest::random_mat(rng, 6, 3);
    std::string rel = "v" + std::to_string(i) + ".pinf";
    write_pinf(dir / rel, feat);
    ManifestRecord r;
    r.annotation.video_id = "v" + std::to_string(i);
    r.annotation.duration_sec = 6.0;
    r.annotation.start_sec = 1.0;
    r.annotation.end_sec = 4.0;
    r.annotation.query_text = {"a", "b"};
    r.feature_file = rel;
    recs.push_back(r);
  }
  write_manifest(dir / "manifest.jsonl", recs);
  auto pairs = load_dataset(dir / "manifest.jsonl");
  REQUIRE(pairs.size() == 3);
  for (int i = 0; i < 3; ++i) CHECK(pairs[i].annotation.video_id == "v" + std::to_string(i));

  SUBCASE("missing feature file names the path") {
    recs[1].feature_file = "absent.pinf";
    write_manifest(dir / "bad1.jsonl", recs);
    try {
      load_dataset(dir / "bad1.jsonl");
      FAIL("expected a load error");
    } catch (const Error& e) {
      CHECK(std::string(e.what()).find("absent.pinf") != std::string::npos);
    }
  }

  SUBCASE("inverted annotation reports the record index") {
    recs[2].annotation.start_sec = 7.0;
    recs[2].annotation.end_sec = 3.0;
    recs[2].annotation.duration_sec = 8.0;
    write_manifest(dir / "bad2.jsonl", recs);
    try {
      load_dataset(dir / "bad2.jsonl");
      FAIL("expected a validation error");
    } catch (const Error& e) {
      CHECK(std::string(e.what()).find("record 2") != std::string::npos);
    }
  }
}

TEST_CASE("synth_generate is deterministic and plants a correlated signal") {
  SyntheticSpec spec;
  spec.num_pairs = 12;
  spec.T = 24;
  spec.D_in = 16;
  spec.vocab_size = 20;
  spec.object_vocab = {"cat", "dog", "car"};
  spec.planted_snr = 2.0;
  spec.seed = 0;

  SynthDataset a = synth_generate(spec);
  SynthDataset b = synth_generate(spec);
  REQUIRE(a.samples.size() == 12);
  for (size_t i = 0; i < a.samples.size(); ++i) {
    CHECK((a.samples[i].video.features - b.samples[i].video.features).cwiseAbs().maxCoeff() ==
          0.0);
    CHECK(a.samples[i].annotation.query_text == b.samples[i].annotation.query_text);
    CHECK(a.samples[i].annotation.start_sec == b.samples[i].annotation.start_sec);
    a.samples[i].video.validate();
    a.samples[i].annotation.validate();
    // Object positions point at object words.
    REQUIRE(!a.samples[i].object_positions.empty());
    for (int p : a.samples[i].object_positions) {
      const std::string& w = a.samples[i].annotation.query_text[p];
      CHECK((w == "cat" || w == "dog" || w == "car"));
    }
  }

  // In-span frames correlate with the planted direction, off-span do not.
  double in_corr = 0.0, out_corr = 0.0;
  int in_n = 0, out_n = 0;
  for (const auto& s : a.samples) {
    Eigen::RowVectorXd dir = Eigen::RowVectorXd::Zero(spec.D_in);
    for (int p : s.object_positions)
      dir += a.token_directions.row(a.vocab.id(s.annotation.query_text[p]));
    dir.normalize();
    int sf = static_cast<int>(s.annotation.start_sec);
    int ef = static_cast<int>(s.annotation.end_sec) - 1;
    for (int f = 0; f < s.video.frames(); ++f) {
      double c = s.video.features.row(f).dot(dir);
      if (f >= sf && f <= ef) {
        in_corr += c;
        ++in_n;
      } else {
        out_corr += c;
        ++out_n;
      }
    }
  }
  CHECK(in_corr / in_n > 1.0);             // planted_snr=2 minus noise
  CHECK(std::abs(out_corr / out_n) < 0.5); // noise only
}

TEST_CASE("synth_generate with zero snr leaves features independent of the query") {
  SyntheticSpec spec;
  spec.num_pairs = 30;
  spec.T = 16;
  spec.D_in = 12;
  spec.vocab_size = 10;
  spec.object_vocab = {"cat", "dog"};
  spec.planted_snr = 0.0;
  spec.seed = 3;
  SynthDataset ds = synth_generate(spec);
  double corr = 0.0;
  int n = 0;
  for (const auto& s : ds.samples) {
    Eigen::RowVectorXd dir = Eigen::RowVectorXd::Zero(spec.D_in);
    for (int p : s.object_positions)
      dir += ds.token_directions.row(ds.vocab.id(s.annotation.query_text[p]));
    dir.normalize();
    for (int f = 0; f < s.video.frames(); ++f) {
      corr += s.video.features.row(f).dot(dir);
      ++n;
    }
  }
  CHECK(std::abs(corr / n) < 0.1);
}

TEST_CASE("synth spec validation") {
  SyntheticSpec spec;
  spec.num_pairs = 1;
  spec.T = 4;
  spec.D_in = 4;
  spec.vocab_size = 1;  // smaller than the object vocabulary
  spec.object_vocab = {"cat", "dog"};
  spec.seed = 0;
  CHECK_THROWS_AS(synth_generate(spec), Error);
}

TEST_CASE("property sweep: generated pairs always satisfy the type invariants") {
  Rng rng(99);
  int total_pairs = 0;
  for (int trial = 0; trial < 150 && total_pairs < 1000; ++trial) {
    SyntheticSpec spec;
    spec.num_pairs = 5 + static_cast<int>(rng.uniform_int(5));
    spec.T = 4 + static_cast<int>(rng.uniform_int(20));
    spec.D_in = 2 + static_cast<int>(rng.uniform_int(10));
    spec.vocab_size = 6 + static_cast<int>(rng.uniform_int(20));
    spec.object_vocab = {"obj0", "obj1", "obj2"};
    spec.planted_snr = rng.uniform() * 3.0;
    spec.seed = rng.next_u64();
    SynthDataset ds = synth_generate(spec);
    for (const auto& s : ds.samples) {
      s.video.validate();
      s.annotation.validate();
      CHECK(s.annotation.end_sec <= s.annotation.duration_sec);
      CHECK(static_cast<int>(s.frame_captions.size()) == spec.T);
      ++total_pairs;
    }
  }
  CHECK(total_pairs >= 1000);
}

TEST_CASE("synthetic dataset writes and reloads bit-identically") {
  SyntheticSpec spec;
  spec.num_pairs = 4;
  spec.T = 8;
  spec.D_in = 6;
  spec.vocab_size = 12;
  spec.object_vocab = {"cat", "dog"};
  spec.planted_snr = 1.0;
  spec.seed = 11;
  SynthDataset ds = synth_generate(spec);

  fs::path dir = temp_dir("synthio");
  write_synth_dataset(ds, dir);
  auto pairs = load_dataset(dir / "manifest.jsonl");
  REQUIRE(pairs.size() == 4);
  for (size_t i = 0; i < pairs.size(); ++i) {
    // PINF stores float32; compare after the same quantization.
    Mat q = ds.samples[i].video.features.cast<float>().cast<double>();
    CHECK((pairs[i].video.features - q).cwiseAbs().maxCoeff() == 0.0);
    CHECK(pairs[i].annotation.query_text == ds.samples[i].annotation.query_text);
    CHECK(pairs[i].object_positions == ds.samples[i].object_positions);
  }
  Vocabulary v = Vocabulary::load(dir / "vocab.txt");
  CHECK(v.size() == ds.vocab.size());
  auto stub = load_stub_captions(dir / "stub_captions.jsonl");
  CHECK(stub.at("synth0") == ds.samples[0].frame_captions);

  // Writing twice produces byte-identical files.
  fs::path dir2 = temp_dir("synthio2");
  write_synth_dataset(synth_generate(spec), dir2);
  std::ifstream f1(dir / "manifest.jsonl", std::ios::binary);
  std::ifstream f2(dir2 / "manifest.jsonl", std::ios::binary);
  std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(s1 == s2);
}

TEST_CASE("vocabulary basics") {
  Vocabulary v({"alpha", "beta"});
  CHECK(v.id("<pad>") == kPadTokenId);
  CHECK(v.id("<mask>") == kMaskTokenId);
  CHECK(v.id("alpha") == 2);
  CHECK_THROWS_AS(v.id("gamma"), Error);
  CHECK(v.encode({"beta", "alpha"}) == std::vector<int>{3, 2});
}
