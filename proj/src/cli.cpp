#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "tsg/harness.hpp"
#include "tsg/plots.hpp"

namespace tsg::harness {

namespace fs = std::filesystem;

namespace {

int cmd_synth(const std::string& out_dir, int pairs, int frames, int dim, int vocab_size,
              int objects, double snr, uint64_t seed) {
  datamodel::SyntheticSpec spec;
  spec.num_pairs = pairs;
  spec.T = frames;
  spec.D_in = dim;
  spec.vocab_size = vocab_size;
  for (int i = 0; i < objects; ++i) spec.object_vocab.push_back("obj" + std::to_string(i));
  spec.planted_snr = snr;
  spec.seed = seed;
  datamodel::SynthDataset ds = datamodel::synth_generate(spec);
  datamodel::write_synth_dataset(ds, out_dir);
  std::printf("wrote %d pairs to %s\n", pairs, out_dir.c_str());
  return 0;
}

int cmd_pseudogen(const std::string& dataset_dir, const std::string& out_file, int f_frames,
                  int embed_dim, uint64_t seed, const std::string& endpoint) {
  DataBundle bundle = load_bundle(dataset_dir);

  // The scoring embedder mirrors the training-time table: same seed, same
  // shape, so cached scores match what training would compute.
  nn::ParamStore ps;
  backbone::EmbeddingTable table(ps, "embed", bundle.vocab.size(), embed_dim);
  ps.init_params(seed);
  model::TableEmbedder embedder(table, bundle.vocab);

  std::unique_ptr<pseudoquery::CaptionerInterface> captioner;
  if (!endpoint.empty()) {
    captioner = std::make_unique<pseudoquery::HttpCaptioner>(endpoint);
  } else {
    TSG_CHECK(!bundle.stub_tables.empty(),
              "pseudogen: dataset has no stub captions; pass --endpoint for a live captioner");
    captioner = std::make_unique<pseudoquery::StubCaptioner>(bundle.stub_tables);
  }

  pseudoquery::CaptionCache cache;
  for (const auto& pair : bundle.pairs) {
    auto captions = pseudoquery::caption_frames(pair.video, pair.annotation.video_id, f_frames,
                                                *captioner);
    // Score now so training can select without re-encoding.
    auto set = pseudoquery::score_and_select_topk(captions, pair.annotation.query_text, embedder,
                                                  static_cast<int>(captions.size()));
    cache[pair.annotation.video_id] = set.selected;
  }
  pseudoquery::save_cache(out_file, cache);
  std::printf("cached captions for %zu videos in %s\n", cache.size(), out_file.c_str());
  return 0;
}

int cmd_train(const std::string& dataset_dir, const std::string& cache_file,
              const std::string& out_dir, TrainConfig cfg) {
  DataBundle bundle = load_bundle(dataset_dir, cache_file.empty() ? fs::path{} : fs::path(cache_file));
  auto session = prepare(cfg, bundle);
  TrainResult result = train(*session, bundle, out_dir);
  std::printf("finished %zu epochs; checkpoint at %s\n", result.history.size(),
              result.checkpoint_path.string().c_str());
  if (!session->val_indices.empty()) {
    EvalResult ev = evaluate(*session, session->val_indices);
    std::printf("val IoU@0.3 %.2f  IoU@0.5 %.2f  IoU@0.7 %.2f\n", ev.iou_at.at(0.3),
                ev.iou_at.at(0.5), ev.iou_at.at(0.7));
  }
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& dataset_dir,
             const std::string& out_dir, const std::string& split) {
  Checkpoint ck = load_checkpoint(checkpoint);
  DataBundle bundle = load_bundle(dataset_dir);
  TSG_CHECK(bundle.vocab.size() == ck.model_cfg.vocab_size,
            "eval: vocabulary size mismatch between checkpoint (" << ck.model_cfg.vocab_size
                                                                  << ") and dataset ("
                                                                  << bundle.vocab.size() << ")");
  TSG_CHECK(bundle.pairs.front().video.dim() == ck.model_cfg.D_in,
            "eval: feature dimension mismatch between checkpoint and dataset");
  auto session = prepare(ck.cfg, bundle, /*for_training=*/false);
  restore_params(session->net, ck);

  std::vector<int> indices;
  if (split == "train")
    indices = session->train_indices;
  else if (split == "val")
    indices = session->val_indices;
  else
    for (int i = 0; i < static_cast<int>(session->samples.size()); ++i) indices.push_back(i);
  TSG_CHECK(!indices.empty(), "eval: split '" << split << "' is empty");

  EvalResult ev = evaluate(*session, indices);
  std::printf("samples: %zu\n", ev.per_sample.size());
  for (const auto& [m, pct] : ev.iou_at) std::printf("IoU@%.1f  %6.2f%%\n", m, pct);
  if (!ev.retrieval_histogram.empty()) {
    std::printf("prompt retrieval histogram (entry: count):");
    for (const auto& [e, n] : ev.retrieval_histogram) std::printf(" %d:%d", e, n);
    std::printf("\n");
  }

  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    write_eval_csv(fs::path(out_dir) / "eval.csv", ev);
    std::ofstream hist(fs::path(out_dir) / "retrieval_hist.csv");
    hist << "entry_index,count\n";
    for (const auto& [e, n] : ev.retrieval_histogram) hist << e << ',' << n << "\n";
    std::printf("wrote %s\n", (fs::path(out_dir) / "eval.csv").string().c_str());
  }
  return 0;
}

int cmd_plot(const std::string& run_dir) {
  auto files = plots::plot_run_dir(run_dir);
  for (const auto& f : files) std::printf("wrote %s\n", f.string().c_str());
  return 0;
}

}  // namespace

int cli(int argc, char** argv) {
  CLI::App app{"temporal sentence grounding with pseudo-query prompts"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  std::string synth_out = "synth_data";
  int pairs = 200, frames = 48, dim = 64, vocab_size = 60, objects = 8;
  double snr = 2.0;
  uint64_t synth_seed = 0;
  synth->add_option("--out", synth_out, "output directory");
  synth->add_option("--pairs", pairs, "number of video/query pairs");
  synth->add_option("--frames", frames, "frames per video");
  synth->add_option("--dim", dim, "raw feature dimension");
  synth->add_option("--vocab-size", vocab_size, "content vocabulary size");
  synth->add_option("--objects", objects, "object-word count");
  synth->add_option("--snr", snr, "planted signal-to-noise ratio");
  synth->add_option("--seed", synth_seed, "generator seed");

  // pseudogen
  auto* pg = app.add_subcommand("pseudogen", "caption frames and cache scored pseudo-queries");
  std::string pg_dataset, pg_out = "pseudo_cache.jsonl", pg_endpoint;
  int pg_frames = 16, pg_embed_dim = 300;
  uint64_t pg_seed = 0;
  pg->add_option("--dataset", pg_dataset, "dataset directory")->required();
  pg->add_option("--out", pg_out, "cache file to write");
  pg->add_option("--frames-per-video", pg_frames, "captions per video (F)");
  pg->add_option("--embed-dim", pg_embed_dim, "scoring embedding dimension");
  pg->add_option("--seed", pg_seed, "embedding init seed (match training seed)");
  pg->add_option("--endpoint", pg_endpoint, "HTTP captioning endpoint (default: stub)");

  // train
  auto* tr = app.add_subcommand("train", "train a model");
  std::string tr_dataset, tr_cache, tr_out = "run", tr_config;
  TrainConfig cfg;
  tr->add_option("--dataset", tr_dataset, "dataset directory")->required();
  tr->add_option("--cache", tr_cache, "pseudo-query cache file");
  tr->add_option("--out", tr_out, "run output directory");
  tr->add_option("--config", tr_config, "JSON config file");
  // Common overrides; everything else comes from the config file.
  auto* o_epochs = tr->add_option("--epochs", cfg.epochs);
  auto* o_batch = tr->add_option("--batch-size", cfg.batch_size);
  auto* o_lr = tr->add_option("--lr", cfg.learning_rate);
  auto* o_seed = tr->add_option("--seed", cfg.seed);
  auto* o_t = tr->add_option("--t", cfg.T);
  auto* o_d = tr->add_option("--d", cfg.D);
  auto* o_k = tr->add_option("--k", cfg.K);
  auto* o_m = tr->add_option("--m-percent", cfg.M_percent);
  auto* o_n = tr->add_option("--n-prompt", cfg.N_prompt);
  auto* o_pool = tr->add_option("--pool-size", cfg.pool_size);
  auto* o_l4 = tr->add_option("--lambda4", cfg.loss_weights.lambda4);
  auto* o_drop = tr->add_option("--dropout", cfg.dropout);
  auto* o_embed = tr->add_option("--embed-dim", cfg.embed_dim_in);
  auto* o_nopin = tr->add_flag("--no-pin", "disable the contrastive intermediary");
  auto* o_noprompt = tr->add_flag("--no-prompt", "disable prompt retrieval");

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string ev_ckpt, ev_dataset, ev_out, ev_split = "all";
  ev->add_option("--checkpoint", ev_ckpt, "checkpoint file")->required();
  ev->add_option("--dataset", ev_dataset, "dataset directory")->required();
  ev->add_option("--out", ev_out, "directory for eval.csv and histograms");
  ev->add_option("--split", ev_split, "train | val | all")
      ->check(CLI::IsMember({"train", "val", "all"}));

  // plot
  auto* pl = app.add_subcommand("plot", "render metric charts and timelines");
  std::string pl_run;
  pl->add_option("--run-dir", pl_run, "run directory with metrics.csv")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (synth->parsed())
      return cmd_synth(synth_out, pairs, frames, dim, vocab_size, objects, snr, synth_seed);
    if (pg->parsed())
      return cmd_pseudogen(pg_dataset, pg_out, pg_frames, pg_embed_dim, pg_seed, pg_endpoint);
    if (tr->parsed()) {
      TrainConfig base = tr_config.empty() ? TrainConfig{} : load_config_file(tr_config);
      // Flag overrides win over the config file.
      if (!o_epochs->empty()) base.epochs = cfg.epochs;
      if (!o_batch->empty()) base.batch_size = cfg.batch_size;
      if (!o_lr->empty()) base.learning_rate = cfg.learning_rate;
      if (!o_seed->empty()) base.seed = cfg.seed;
      if (!o_t->empty()) base.T = cfg.T;
      if (!o_d->empty()) base.D = cfg.D;
      if (!o_k->empty()) base.K = cfg.K;
      if (!o_m->empty()) base.M_percent = cfg.M_percent;
      if (!o_n->empty()) base.N_prompt = cfg.N_prompt;
      if (!o_pool->empty()) base.pool_size = cfg.pool_size;
      if (!o_l4->empty()) base.loss_weights.lambda4 = cfg.loss_weights.lambda4;
      if (!o_drop->empty()) base.dropout = cfg.dropout;
      if (!o_embed->empty()) base.embed_dim_in = cfg.embed_dim_in;
      if (o_nopin->count() > 0) base.use_pin = false;
      if (o_noprompt->count() > 0) base.use_prompt = false;
      base.validate();
      return cmd_train(tr_dataset, tr_cache, tr_out, base);
    }
    if (ev->parsed()) return cmd_eval(ev_ckpt, ev_dataset, ev_out, ev_split);
    if (pl->parsed()) return cmd_plot(pl_run);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}

}  // namespace tsg::harness
