#include "tsg/harness.hpp"

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <thread>

#include <json.hpp>

namespace tsg::harness {

using nlohmann::json;

void TrainConfig::validate() const {
  TSG_CHECK(epochs >= 1, "config: epochs must be >= 1");
  TSG_CHECK(batch_size >= 1, "config: batch_size must be >= 1");
  TSG_CHECK(learning_rate > 0.0, "config: learning_rate must be positive");
  TSG_CHECK(grad_clip_norm > 0.0, "config: grad_clip_norm must be positive");
  TSG_CHECK(K >= 1, "config: K must be >= 1");
  TSG_CHECK(M_percent >= 0.0 && M_percent <= 100.0, "config: M_percent outside [0,100]");
  TSG_CHECK(N_prompt >= 0, "config: negative N_prompt");
  TSG_CHECK(pool_size >= 1, "config: pool_size must be >= 1");
  TSG_CHECK(T >= 1 && D >= 1, "config: bad T/D");
  TSG_CHECK(D % num_heads == 0, "config: D not divisible by num_heads");
  TSG_CHECK(lr_schedule == "linear" || lr_schedule == "constant" || lr_schedule == "cosine",
            "config: unknown lr_schedule '" << lr_schedule << "'");
  TSG_CHECK(train_fraction > 0.0 && train_fraction <= 1.0, "config: bad train_fraction");
  TSG_CHECK(threads >= 1, "config: threads must be >= 1");
  TSG_CHECK(F_frames >= 1, "config: F_frames must be >= 1");
}

std::string to_json(const TrainConfig& c) {
  json j;
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["learning_rate"] = c.learning_rate;
  j["grad_clip_norm"] = c.grad_clip_norm;
  j["seed"] = c.seed;
  j["loss_weights"] = {{"lambda1", c.loss_weights.lambda1},
                       {"lambda2", c.loss_weights.lambda2},
                       {"lambda3", c.loss_weights.lambda3},
                       {"lambda4", c.loss_weights.lambda4}};
  j["K"] = c.K;
  j["M_percent"] = c.M_percent;
  j["N_prompt"] = c.N_prompt;
  j["pool_size"] = c.pool_size;
  j["T"] = c.T;
  j["D"] = c.D;
  j["num_heads"] = c.num_heads;
  j["num_layers"] = c.num_layers;
  j["dropout"] = c.dropout;
  j["embed_dim_in"] = c.embed_dim_in;
  j["F_frames"] = c.F_frames;
  j["lr_schedule"] = c.lr_schedule;
  j["adam_beta1"] = c.adam_beta1;
  j["adam_beta2"] = c.adam_beta2;
  j["adam_eps"] = c.adam_eps;
  j["train_fraction"] = c.train_fraction;
  j["use_pin"] = c.use_pin;
  j["use_prompt"] = c.use_prompt;
  j["key_pull_weight"] = c.key_pull_weight;
  j["decode_gamma"] = c.decode_gamma;
  j["extend_ratio"] = c.extend_ratio;
  j["t_min"] = c.t_min;
  j["t_max"] = c.t_max;
  j["max_mask_slots"] = c.max_mask_slots;
  j["full_enum_max_t"] = c.full_enum_max_t;
  j["threads"] = c.threads;
  return j.dump(2);
}

TrainConfig config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const std::exception& e) {
    throw Error(std::string("config: invalid JSON: ") + e.what());
  }
  TrainConfig c;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  get("epochs", c.epochs);
  get("batch_size", c.batch_size);
  get("learning_rate", c.learning_rate);
  get("grad_clip_norm", c.grad_clip_norm);
  get("seed", c.seed);
  if (j.contains("loss_weights")) {
    const json& w = j.at("loss_weights");
    if (w.contains("lambda1")) c.loss_weights.lambda1 = w.at("lambda1").get<double>();
    if (w.contains("lambda2")) c.loss_weights.lambda2 = w.at("lambda2").get<double>();
    if (w.contains("lambda3")) c.loss_weights.lambda3 = w.at("lambda3").get<double>();
    if (w.contains("lambda4")) c.loss_weights.lambda4 = w.at("lambda4").get<double>();
  }
  get("K", c.K);
  get("M_percent", c.M_percent);
  get("N_prompt", c.N_prompt);
  get("pool_size", c.pool_size);
  get("T", c.T);
  get("D", c.D);
  get("num_heads", c.num_heads);
  get("num_layers", c.num_layers);
  get("dropout", c.dropout);
  get("embed_dim_in", c.embed_dim_in);
  get("F_frames", c.F_frames);
  get("lr_schedule", c.lr_schedule);
  get("adam_beta1", c.adam_beta1);
  get("adam_beta2", c.adam_beta2);
  get("adam_eps", c.adam_eps);
  get("train_fraction", c.train_fraction);
  get("use_pin", c.use_pin);
  get("use_prompt", c.use_prompt);
  get("key_pull_weight", c.key_pull_weight);
  get("decode_gamma", c.decode_gamma);
  get("extend_ratio", c.extend_ratio);
  get("t_min", c.t_min);
  get("t_max", c.t_max);
  get("max_mask_slots", c.max_mask_slots);
  get("full_enum_max_t", c.full_enum_max_t);
  get("threads", c.threads);
  c.validate();
  return c;
}

TrainConfig load_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  TSG_CHECK(in.good(), "config: cannot open " << path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return config_from_json(text);
}

DataBundle load_bundle(const std::filesystem::path& dataset_dir,
                       const std::filesystem::path& cache_path) {
  DataBundle b;
  b.pairs = datamodel::load_dataset(dataset_dir / "manifest.jsonl");
  b.vocab = datamodel::Vocabulary::load(dataset_dir / "vocab.txt");
  if (std::filesystem::exists(dataset_dir / "object_vocab.txt"))
    b.object_vocab = pseudoquery::load_object_vocab(dataset_dir / "object_vocab.txt");
  if (std::filesystem::exists(dataset_dir / "stub_captions.jsonl"))
    b.stub_tables = datamodel::load_stub_captions(dataset_dir / "stub_captions.jsonl");
  if (!cache_path.empty()) b.cache = pseudoquery::load_cache(cache_path);
  return b;
}

DataBundle bundle_from_synth(const datamodel::SynthDataset& ds) {
  DataBundle b;
  b.vocab = ds.vocab;
  b.object_vocab.insert(ds.object_vocab.begin(), ds.object_vocab.end());
  for (const auto& s : ds.samples) {
    datamodel::LoadedPair p;
    p.video = s.video;
    p.annotation = s.annotation;
    p.object_positions = s.object_positions;
    b.pairs.push_back(std::move(p));
    b.stub_tables[s.annotation.video_id] = s.frame_captions;
  }
  return b;
}

double iou(std::pair<double, double> a, std::pair<double, double> b) {
  return interval_iou(a.first, a.second, b.first, b.second);
}

double recall_at_iou(const std::vector<double>& ious, double m) {
  TSG_CHECK(!ious.empty(), "recall_at_iou: empty result set");
  TSG_CHECK(m > 0.0 && m < 1.0, "recall_at_iou: threshold outside (0,1)");
  int hits = 0;
  for (double v : ious)
    if (v > m) ++hits;  // strictly greater
  return 100.0 * hits / static_cast<double>(ious.size());
}

model::ModelConfig model_config_from(const TrainConfig& cfg, int vocab_size, int d_in) {
  model::ModelConfig mc;
  mc.T = cfg.T;
  mc.D = cfg.D;
  mc.D_in = d_in;
  mc.num_heads = cfg.num_heads;
  mc.num_layers = cfg.num_layers;
  mc.dropout = cfg.dropout;
  mc.embed_dim_in = cfg.embed_dim_in;
  mc.vocab_size = vocab_size;
  mc.use_pin = cfg.use_pin;
  mc.use_prompt = cfg.use_prompt;
  mc.prompt_len = cfg.N_prompt;
  mc.pool_size = cfg.pool_size;
  mc.key_pull_weight = cfg.key_pull_weight;
  mc.max_mask_slots = cfg.max_mask_slots;
  mc.full_enum_max_t = cfg.full_enum_max_t;
  mc.decode_gamma = cfg.decode_gamma;
  mc.extend_ratio = cfg.extend_ratio;
  mc.t_min = cfg.t_min;
  mc.t_max = cfg.t_max;
  return mc;
}

namespace {

/// Build the pseudo-query set for one pair, preferring cached scores.
pseudoquery::PseudoQuerySet build_pseudo_set(const TrainConfig& cfg, const DataBundle& bundle,
                                             const datamodel::LoadedPair& pair,
                                             const pseudoquery::TextEmbedder& embedder) {
  const std::string& vid = pair.annotation.video_id;
  std::vector<pseudoquery::FrameCaption> captions;
  auto cached = bundle.cache.find(vid);
  if (cached != bundle.cache.end()) {
    captions = cached->second;
  } else {
    auto stub_it = bundle.stub_tables.find(vid);
    TSG_CHECK(stub_it != bundle.stub_tables.end(),
              "no caption source for video " << vid << ": provide a cache or stub captions");
    pseudoquery::StubCaptioner stub({{vid, stub_it->second}});
    captions = pseudoquery::caption_frames(pair.video, vid, cfg.F_frames, stub);
  }

  bool all_scored = !captions.empty();
  for (const auto& c : captions) all_scored = all_scored && c.scored;
  if (all_scored) {
    // Reuse cached scores: same ordering rule as the scoring path.
    std::stable_sort(captions.begin(), captions.end(),
                     [](const pseudoquery::FrameCaption& a, const pseudoquery::FrameCaption& b) {
                       if (a.similarity_to_gt != b.similarity_to_gt)
                         return a.similarity_to_gt > b.similarity_to_gt;
                       return a.frame_index < b.frame_index;
                     });
    pseudoquery::PseudoQuerySet set;
    size_t keep = std::min<size_t>(cfg.K, captions.size());
    set.selected.assign(captions.begin(), captions.begin() + keep);
    for (const auto& c : set.selected)
      set.concat_tokens.insert(set.concat_tokens.end(), c.tokens.begin(), c.tokens.end());
    return set;
  }
  return pseudoquery::score_and_select_topk(std::move(captions), pair.annotation.query_text,
                                            embedder, cfg.K);
}

uint64_t mask_seed_for(const TrainConfig& cfg, const std::string& vid, int epoch) {
  return seed_mix(seed_mix(cfg.seed, fnv1a(vid)), 9000 + static_cast<uint64_t>(epoch));
}

double lr_for_epoch(const TrainConfig& cfg, int epoch) {
  if (cfg.lr_schedule == "constant") return cfg.learning_rate;
  if (cfg.lr_schedule == "cosine")
    return cfg.learning_rate * 0.5 * (1.0 + std::cos(M_PI * epoch / cfg.epochs));
  return cfg.learning_rate * (1.0 - static_cast<double>(epoch) / cfg.epochs);  // linear
}

void run_parallel(int n, int threads, const std::function<void(int)>& fn) {
  if (threads <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> pool;
  for (int w = 0; w < threads; ++w) {
    pool.emplace_back([&, w]() {
      try {
          for (int i = w; i < n; i += threads) fn(i);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  std::string format_g17(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
  }

  }  // namespace

  std::unique_ptr<Session> prepare(const TrainConfig& cfg, const DataBundle& bundle,
                                   bool for_training) {
    cfg.validate();
    TSG_CHECK(!bundle.pairs.empty(), "prepare: empty dataset");
    const int d_in = bundle.pairs.front().video.dim();
    auto session = std::make_unique<Session>(model_config_from(cfg, bundle.vocab.size(), d_in));
    session->cfg = cfg;
    session->net.init(cfg.seed);

    const bool need_pseudo = for_training && (cfg.use_pin || cfg.use_prompt);
    model::TableEmbedder embedder(session->net.embeddings(), bundle.vocab);
    for (const auto& pair : bundle.pairs) {
      TSG_CHECK(pair.video.dim() == d_in, "prepare: inconsistent feature dims in dataset");
      model::Sample s;
      s.video = datamodel::resample_video(pair.video, cfg.T);
      s.annotation = pair.annotation;
      s.query_ids = bundle.vocab.encode(pair.annotation.query_text);
      if (need_pseudo) s.pseudo = build_pseudo_set(cfg, bundle, pair, embedder);
      session->samples.push_back(std::move(s));
    }

    for (int i = 0; i < static_cast<int>(session->samples.size()); ++i) {
      uint64_t h = seed_mix(cfg.seed, fnv1a(session->samples[i].annotation.video_id));
      bool is_train = (h % 10000) < static_cast<uint64_t>(cfg.train_fraction * 10000.0);
      if (is_train || cfg.train_fraction >= 1.0)
        session->train_indices.push_back(i);
      else
        session->val_indices.push_back(i);
    }
    // A degenerate split would make training impossible; fall back to all-train.
    if (session->train_indices.empty()) {
      session->train_indices = session->val_indices;
      session->val_indices.clear();
    }
    return session;
  }

  TrainResult train(Session& session, const DataBundle& bundle,
                    const std::filesystem::path& out_dir, const TrainOptions& opts) {
    const TrainConfig& cfg = session.cfg;
    model::GroundingModel& net = session.net;
    TrainResult result;
    result.train_indices = session.train_indices;
    result.val_indices = session.val_indices;

    if (opts.write_outputs) std::filesystem::create_directories(out_dir);
    std::ofstream csv;
    if (opts.write_outputs) {
      csv.open(out_dir / "metrics.csv");
      TSG_CHECK(csv.good(), "train: cannot write metrics.csv in " << out_dir);
      csv << "epoch,l_pre,l_bound,l_con,l_key,total,iou@0.3,iou@0.5,iou@0.7\n";
    }

    nn::Adam adam(net.params(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    const double lambda4 = cfg.loss_weights.lambda4;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
      double lr = lr_for_epoch(cfg, epoch);
      std::vector<int> order = session.train_indices;
      Rng shuffle_rng(seed_mix(cfg.seed, 500 + static_cast<uint64_t>(epoch)));
      shuffle_rng.shuffle(order);

      double ep_pre = 0, ep_bound = 0, ep_con = 0, ep_key = 0;
      int batch_count = 0;

      for (size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_size) {
        size_t bend = std::min(order.size(), b0 + cfg.batch_size);
        const int bsz = static_cast<int>(bend - b0);
        const int batch_index = static_cast<int>(b0 / cfg.batch_size);

        // Per-sample masked pseudo sets and dropout streams for this step.
        struct Slot {
          const model::Sample* sample = nullptr;
          std::vector<int> pseudo_ids;
          std::vector<int> mask_positions;
          Rng dropout_rng{0};
          std::unique_ptr<model::TrainForward> fwd;
        };
        std::vector<Slot> slots(bsz);
        for (int i = 0; i < bsz; ++i) {
          const model::Sample& s = session.samples[order[b0 + i]];
          Slot& slot = slots[i];
          slot.sample = &s;
          slot.dropout_rng =
              Rng(seed_mix(seed_mix(cfg.seed, fnv1a(s.annotation.video_id)),
                           40000 + static_cast<uint64_t>(epoch)));
          if (cfg.use_pin || cfg.use_prompt) {
            pseudoquery::PseudoQuerySet masked = s.pseudo;
            if (cfg.use_pin && cfg.M_percent > 0.0) {
              masked = pseudoquery::mask_object_words(
                  s.pseudo, bundle.object_vocab, cfg.M_percent,
                  mask_seed_for(cfg, s.annotation.video_id, epoch));
            }
            slot.pseudo_ids = bundle.vocab.encode(masked.concat_tokens);
            slot.mask_positions = masked.mask_positions;
          }
          slot.fwd = std::make_unique<model::TrainForward>();
        }

        try {
        run_parallel(bsz, cfg.threads, [&](int i) {
          Slot& slot = slots[i];
          net.forward_train(*slot.sample, slot.pseudo_ids, slot.mask_positions, cfg.loss_weights,
                            cfg.dropout, &slot.dropout_rng, *slot.fwd);
        });

        // Batch-level contrastive term over the pooled pairs.
        double l_con_value = 0.0;
        nn::Graph batch_graph;
        std::vector<Mat> v_grads(bsz), p_grads(bsz);
        bool pin_ran = cfg.use_pin && slots[0].fwd->v_tilde.valid();
        if (pin_ran) {
          Mat vb(bsz, cfg.D), pb(bsz, cfg.D);
          for (int i = 0; i < bsz; ++i) {
            vb.row(i) = slots[i].fwd->v_tilde.val().row(0);
            pb.row(i) = slots[i].fwd->p_tilde.val().row(0);
          }
          ad::Var vbv = batch_graph.tape.leaf(vb, true);
          ad::Var pbv = batch_graph.tape.leaf(pb, true);
          ad::Var eps = net.intermediary().epsilon(batch_graph);
          ad::Var l_con = pin::contrastive_loss(vbv, pbv, eps);
          l_con_value = l_con.scalar();
          if (lambda4 != 0.0) {
            batch_graph.tape.backward(l_con);
            for (int i = 0; i < bsz; ++i) {
              v_grads[i] = batch_graph.tape.grad(vbv).row(i) * lambda4;
              p_grads[i] = batch_graph.tape.grad(pbv).row(i) * lambda4;
            }
          }
        }

        double batch_pre = 0, batch_bound = 0, batch_key = 0;
        for (int i = 0; i < bsz; ++i) {
          batch_pre += slots[i].fwd->l_pre / bsz;
          batch_bound += slots[i].fwd->l_bound / bsz;
          batch_key += slots[i].fwd->l_key / bsz;
        }
        double batch_total = cfg.loss_weights.lambda2 * batch_pre +
                             cfg.loss_weights.lambda3 * batch_bound + batch_key +
                             lambda4 * l_con_value;
        TSG_CHECK(std::isfinite(batch_total),
                  "train: non-finite loss at epoch " << epoch << " batch " << batch_index);

        run_parallel(bsz, cfg.threads, [&](int i) {
          Slot& slot = slots[i];
          std::vector<std::pair<ad::Var, Mat>> seeds;
          Mat one(1, 1);
          one(0, 0) = 1.0 / bsz;
          seeds.emplace_back(slot.fwd->sample_loss, one);
          if (pin_ran && lambda4 != 0.0) {
            seeds.emplace_back(slot.fwd->v_tilde, v_grads[i]);
            seeds.emplace_back(slot.fwd->p_tilde, p_grads[i]);
          }
          slot.fwd->graph.tape.backward(seeds);
        });

        // Deterministic accumulation: batch tape first, then sample order.
        net.params().zero_grads();
        if (pin_ran && lambda4 != 0.0) {
          for (auto& [p, gmat] : batch_graph.take_grads()) p->grad += gmat * lambda4;
        }
        for (int i = 0; i < bsz; ++i) {
          for (auto& [p, gmat] : slots[i].fwd->graph.take_grads()) p->grad += gmat;
        }

        net.params().clip_grad_norm(cfg.grad_clip_norm);
        adam.step(lr);

        ep_pre += batch_pre;
        ep_bound += batch_bound;
        ep_con += l_con_value;
        ep_key += batch_key;
        ++batch_count;

        // Last write wins, so after training this holds the final epoch's entry.
        for (int i = 0; i < bsz; ++i)
          if (slots[i].fwd->retrieved_entry >= 0)
            result.last_train_retrieval[slots[i].sample->annotation.video_id] =
                slots[i].fwd->retrieved_entry;
      } catch (const Error& e) {
        throw Error("train aborted at epoch " + std::to_string(epoch) + " batch " +
                    std::to_string(batch_index) + ": " + e.what());
      }
    }

    MetricsRow row;
    row.epoch = epoch;
    row.l_pre = ep_pre / batch_count;
    row.l_bound = ep_bound / batch_count;
    row.l_con = ep_con / batch_count;
    row.l_key = ep_key / batch_count;
    row.total = cfg.loss_weights.lambda2 * row.l_pre + cfg.loss_weights.lambda3 * row.l_bound +
                lambda4 * row.l_con + row.l_key;

    EvalResult train_eval = evaluate(session, session.train_indices);
    row.iou_03 = train_eval.iou_at.at(0.3);
    row.iou_05 = train_eval.iou_at.at(0.5);
    row.iou_07 = train_eval.iou_at.at(0.7);
    result.history.push_back(row);

    if (opts.write_outputs) {
      csv << row.epoch << ',' << format_g17(row.l_pre) << ',' << format_g17(row.l_bound) << ','
          << format_g17(row.l_con) << ',' << format_g17(row.l_key) << ','
          << format_g17(row.total) << ',' << format_g17(row.iou_03) << ','
          << format_g17(row.iou_05) << ',' << format_g17(row.iou_07) << "\n";
      csv.flush();
      result.checkpoint_path = out_dir / "checkpoint.pinc";
      save_checkpoint(result.checkpoint_path, net, cfg);
    }
    if (!opts.quiet) {
      std::printf("epoch %3d  lr %.2e  pre %.4f  bound %.4f  con %.4f  key %.4f  iou@0.7 %.1f\n",
                  epoch, lr, row.l_pre, row.l_bound, row.l_con, row.l_key, row.iou_07);
      std::fflush(stdout);
    }
    if (opts.stop_at_train_iou07 >= 0.0 && row.iou_07 >= opts.stop_at_train_iou07) break;
  }
  return result;
}

EvalResult evaluate(Session& session, const std::vector<int>& indices) {
  TSG_CHECK(!indices.empty(), "evaluate: no samples");
  EvalResult result;
  result.per_sample.resize(indices.size());

  run_parallel(static_cast<int>(indices.size()), session.cfg.threads, [&](int k) {
    const model::Sample& s = session.samples[indices[k]];
    model::Prediction pred = session.net.predict(s);
    EvalResult::PerSample& row = result.per_sample[k];
    row.video_id = s.annotation.video_id;
    row.pred_start = pred.pred_start_sec;
    row.pred_end = pred.pred_end_sec;
    row.gt_start = s.annotation.start_sec;
    row.gt_end = s.annotation.end_sec;
    row.iou = iou({row.pred_start, row.pred_end}, {row.gt_start, row.gt_end});
    row.retrieved_entry = pred.retrieved_entry;
  });

  std::vector<double> ious;
  for (const auto& r : result.per_sample) {
    ious.push_back(r.iou);
    if (r.retrieved_entry >= 0) result.retrieval_histogram[r.retrieved_entry]++;
  }
  for (double m : {0.3, 0.5, 0.7}) result.iou_at[m] = recall_at_iou(ious, m);
  return result;
}

// ---- checkpoint I/O ----

namespace {
constexpr char kCkptMagic[4] = {'P', 'I', 'N', 'C'};
constexpr uint32_t kCkptVersion = 1;
}  // namespace

void save_checkpoint(const std::filesystem::path& path, const model::GroundingModel& net,
                     const TrainConfig& cfg) {
  json meta;
  meta["config"] = json::parse(to_json(cfg));
  meta["model"] = {{"vocab_size", net.config().vocab_size}, {"d_in", net.config().D_in}};
  json plist = json::array();
  for (const auto& p : net.params().items()) {
    plist.push_back({{"name", p->name},
                     {"rows", static_cast<int>(p->value.rows())},
                     {"cols", static_cast<int>(p->value.cols())}});
  }
  meta["params"] = std::move(plist);
  std::string header = meta.dump();

  std::ofstream out(path, std::ios::binary);
  TSG_CHECK(out.good(), "save_checkpoint: cannot open " << path);
  out.write(kCkptMagic, 4);
  uint32_t version = kCkptVersion;
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  uint64_t hlen = header.size();
  out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (const auto& p : net.params().items()) {
    out.write(reinterpret_cast<const char*>(p->value.data()),
              static_cast<std::streamsize>(sizeof(double) * p->value.size()));
  }
  TSG_CHECK(out.good(), "save_checkpoint: write failed for " << path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  TSG_CHECK(in.good(), "load_checkpoint: cannot open " << path);
  char magic[4];
  in.read(magic, 4);
  TSG_CHECK(in.good() && std::memcmp(magic, kCkptMagic, 4) == 0,
            "load_checkpoint: " << path << " is not a checkpoint");
  uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  TSG_CHECK(version == kCkptVersion, "load_checkpoint: unsupported version " << version);
  uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  TSG_CHECK(in.good() && hlen > 0 && hlen < (1ull << 24), "load_checkpoint: corrupt header");
  std::string header(hlen, '\0');
  in.read(header.data(), static_cast<std::streamsize>(hlen));
  json meta = json::parse(header);

  Checkpoint ck;
  ck.cfg = config_from_json(meta.at("config").dump());
  ck.model_cfg = model_config_from(ck.cfg, meta.at("model").at("vocab_size").get<int>(),
                                   meta.at("model").at("d_in").get<int>());
  for (const auto& jp : meta.at("params")) {
    int rows = jp.at("rows").get<int>(), cols = jp.at("cols").get<int>();
    Mat m(rows, cols);
    in.read(reinterpret_cast<char*>(m.data()),
            static_cast<std::streamsize>(sizeof(double) * m.size()));
    TSG_CHECK(in.good(), "load_checkpoint: truncated parameter data");
    ck.params.emplace_back(jp.at("name").get<std::string>(), std::move(m));
  }
  return ck;
}

void restore_params(model::GroundingModel& net, const Checkpoint& ck) {
  TSG_CHECK(net.params().count() == ck.params.size(),
            "restore_params: parameter count mismatch ("
                << net.params().count() << " in model, " << ck.params.size() << " in checkpoint)");
  for (const auto& [name, value] : ck.params) {
    nn::Parameter* p = net.params().find(name);
    TSG_CHECK(p != nullptr, "restore_params: model lacks parameter " << name);
    TSG_CHECK(p->value.rows() == value.rows() && p->value.cols() == value.cols(),
              "restore_params: shape mismatch for " << name);
    p->value = value;
  }
}

void write_metrics_csv(const std::filesystem::path& path,
                       const std::vector<MetricsRow>& history) {
  std::ofstream out(path);
  TSG_CHECK(out.good(), "write_metrics_csv: cannot open " << path);
  out << "epoch,l_pre,l_bound,l_con,l_key,total,iou@0.3,iou@0.5,iou@0.7\n";
  for (const auto& r : history) {
    out << r.epoch << ',' << format_g17(r.l_pre) << ',' << format_g17(r.l_bound) << ','
        << format_g17(r.l_con) << ',' << format_g17(r.l_key) << ',' << format_g17(r.total) << ','
        << format_g17(r.iou_03) << ',' << format_g17(r.iou_05) << ',' << format_g17(r.iou_07)
        << "\n";
  }
}

void write_eval_csv(const std::filesystem::path& path, const EvalResult& result) {
  std::ofstream out(path);
  TSG_CHECK(out.good(), "write_eval_csv: cannot open " << path);
  out << "video_id,pred_start,pred_end,gt_start,gt_end,iou,retrieved_entry\n";
  for (const auto& r : result.per_sample) {
    out << r.video_id << ',' << format_g17(r.pred_start) << ',' << format_g17(r.pred_end) << ','
        << format_g17(r.gt_start) << ',' << format_g17(r.gt_end) << ',' << format_g17(r.iou)
        << ',' << r.retrieved_entry << "\n";
  }
}

}  // namespace tsg::harness
