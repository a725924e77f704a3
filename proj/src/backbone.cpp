#include "tsg/backbone.hpp"

#include <fstream>
#include <sstream>

namespace tsg::backbone {

using ad::Var;

EmbeddingTable::EmbeddingTable(nn::ParamStore& ps, const std::string& name, int vocab_size,
                               int dim, bool frozen)
    : frozen_(frozen) {
  TSG_CHECK(vocab_size > datamodel::kMaskTokenId, "embedding table too small for reserved rows");
  weights_ = &ps.add(name + ".weights", vocab_size, dim, nn::Init::kNormalScaled);
}

Var EmbeddingTable::lookup(nn::Graph& g, const std::vector<int>& ids, int valid) const {
  Var table = frozen_ ? g.tape.constant(weights_->value) : g.use(*weights_);
  return ad::embed_rows(table, ids, valid);
}

Mat EmbeddingTable::lookup_values(const std::vector<int>& ids) const {
  Mat out(static_cast<Eigen::Index>(ids.size()), dim());
  for (size_t i = 0; i < ids.size(); ++i) {
    TSG_CHECK(ids[i] >= 0 && ids[i] < vocab_size(),
              "embedding lookup: token id " << ids[i] << " out of vocabulary");
    out.row(static_cast<Eigen::Index>(i)) = weights_->value.row(ids[i]);
  }
  return out;
}

void EmbeddingTable::load_pretrained(const std::filesystem::path& path,
                                     const datamodel::Vocabulary& vocab) {
  std::ifstream in(path);
  TSG_CHECK(in.good(), "embedding file: cannot open " << path);
  std::string line;
  int loaded = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream iss(line);
    std::string token;
    iss >> token;
    if (!vocab.contains(token)) continue;
    int id = vocab.id(token);
    TSG_CHECK(id < vocab_size(), "embedding file: id " << id << " exceeds table");
    for (int c = 0; c < dim(); ++c) {
      double v;
      TSG_CHECK(static_cast<bool>(iss >> v),
                "embedding file: token '" << token << "' has fewer than " << dim() << " values");
      weights_->value(id, c) = v;
    }
    ++loaded;
  }
  TSG_CHECK(loaded > 0, "embedding file " << path << " matched no vocabulary tokens");
}

EncoderBlock EncoderBlock::create(nn::ParamStore& ps, const std::string& name,
                                  const EncoderConfig& cfg) {
  EncoderBlock b;
  b.attn = nn::MhaLayer::create(ps, name + ".attn", cfg.D, cfg.num_heads);
  b.ln = nn::LayerNormLayer::create(ps, name + ".ln", cfg.D);
  return b;
}

Var EncoderBlock::apply(nn::Graph& g, ad::Var x, int valid, const ForwardCtx& ctx) const {
  Var att = attn.apply(g, x, valid, x, valid);
  if (ctx.dropout_active()) {
    // Dropout on the attention delta keeps the residual path intact.
    Var delta = ad::sub(att, x);
    double keep_p = 1.0 - ctx.dropout;
    Mat keep(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < keep.rows(); ++r)
      for (Eigen::Index c = 0; c < keep.cols(); ++c)
        keep(r, c) = ctx.rng->uniform() < keep_p ? 1.0 / keep_p : 0.0;
    att = ad::add(x, ad::dropout_mask(delta, keep));
  }
  return ad::mask_rows(ln.apply(g, att, valid), valid);
}

VisualEncoder::VisualEncoder(nn::ParamStore& ps, const std::string& name, int d_in,
                             const EncoderConfig& cfg)
    : cfg_(cfg) {
  cfg_.validate();
  proj_ = nn::LinearLayer::create(ps, name + ".proj", d_in, cfg.D);
  for (int i = 0; i < cfg.num_layers; ++i)
    blocks_.push_back(EncoderBlock::create(ps, name + ".block" + std::to_string(i), cfg));
}

Var VisualEncoder::encode(nn::Graph& g, const Mat& features, int valid_frames,
                          const ForwardCtx& ctx) const {
  TSG_CHECK(features.cols() == proj_.w->value.rows(),
            "visual encoder: input dim " << features.cols() << " does not match projection "
                                         << proj_.w->value.rows());
  TSG_CHECK(valid_frames >= 1 && valid_frames <= features.rows(),
            "visual encoder: bad valid_frames");
  TSG_CHECK(all_finite(features), "visual encoder: non-finite input");
  Var x = g.tape.constant(features);
  Var h = ad::mask_rows(proj_.apply(g, x), valid_frames);
  for (const auto& b : blocks_) h = b.apply(g, h, valid_frames, ctx);
  return h;
}

TextualEncoder::TextualEncoder(nn::ParamStore& ps, const std::string& name, EmbeddingTable* embed,
                               const EncoderConfig& cfg)
    : cfg_(cfg), embed_(embed) {
  cfg_.validate();
  TSG_CHECK(embed_ != nullptr, "textual encoder: null embedding table");
  proj_ = nn::LinearLayer::create(ps, name + ".proj", embed->dim(), cfg.D);
  for (int i = 0; i < cfg.num_layers; ++i)
    blocks_.push_back(EncoderBlock::create(ps, name + ".block" + std::to_string(i), cfg));
}

Var TextualEncoder::encode(nn::Graph& g, const std::vector<int>& token_ids, int valid_tokens,
                           const ForwardCtx& ctx) const {
  TSG_CHECK(!token_ids.empty(), "textual encoder: no tokens");
  TSG_CHECK(valid_tokens >= 1 && valid_tokens <= static_cast<int>(token_ids.size()),
            "textual encoder: bad valid_tokens");
  Var e = embed_->lookup(g, token_ids, valid_tokens);
  Var h = ad::mask_rows(proj_.apply(g, e), valid_tokens);
  for (const auto& b : blocks_) h = b.apply(g, h, valid_tokens, ctx);
  return h;
}

CrossSimilarity::CrossSimilarity(nn::ParamStore& ps, const std::string& name, int d) {
  fc_v_ = nn::LinearLayer::create(ps, name + ".fc_v", d, d);
  fc_q_ = nn::LinearLayer::create(ps, name + ".fc_q", d, d);
}

Var CrossSimilarity::apply(nn::Graph& g, ad::Var v_enc, ad::Var q_enc, int valid_tokens) const {
  Var logits = ad::matmul(fc_v_.apply(g, v_enc), ad::transpose(fc_q_.apply(g, q_enc)));
  return ad::row_softmax(logits, static_cast<int>(v_enc.rows()), valid_tokens);
}

}  // namespace tsg::backbone
