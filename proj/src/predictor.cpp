#include "capsim/predictor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <unordered_map>

#include <json.hpp>

namespace capsim::predictor {

using nlohmann::json;

void ModelConfig::validate() const {
  if (embed_dim < 1 || heads < 1 || layers < 0 || ffn_multiplier < 1 || mlp_hidden < 1)
    throw ConfigError("model dimensions must be positive");
  if (embed_dim % heads != 0) throw ConfigError("embed_dim must be divisible by heads");
  if (l_token < 2) throw ConfigError("l_token must be >= 2");
  if (l_clip_max < 1) throw ConfigError("l_clip_max must be >= 1");
  if (vocab_size < 1) throw ConfigError("vocab_size must be set");
  if (context_rows < 1) throw ConfigError("context_rows must be set");
}

namespace {

template <typename T>
void fill_uniform(Mat<T>& m, Rng& rng, double bound) {
  for (auto& v : m.data) v = static_cast<T>(rng.range(-bound, bound));
}

double softplus_inverse(double y) {
  // inverse of log(1 + e^x); for large y this is y itself
  if (y > 30.0) return y;
  return std::log(std::expm1(std::max(y, 1e-9)));
}

}  // namespace

template <typename T>
Parameters<T> init_parameters(const ModelConfig& cfg, double label_mean) {
  cfg.validate();
  Rng rng(cfg.seed * 0x9e3779b97f4a7c15ull + 0xd1b54a32d192ed03ull);
  const size_t e = static_cast<size_t>(cfg.embed_dim);
  const size_t dh = e / static_cast<size_t>(cfg.heads);
  const size_t ff = e * static_cast<size_t>(cfg.ffn_multiplier);
  const size_t hid = static_cast<size_t>(cfg.mlp_hidden);

  Parameters<T> p;
  p.embedding = Mat<T>(cfg.vocab_size, e);
  fill_uniform(p.embedding, rng, 1.0 / std::sqrt(static_cast<double>(e)));

  auto make_stack = [&](int layers) {
    std::vector<AttentionLayerParams<T>> stack(static_cast<size_t>(layers));
    for (auto& layer : stack) {
      const double attn_bound = std::sqrt(6.0 / static_cast<double>(e + dh));
      for (int h = 0; h < cfg.heads; ++h) {
        layer.wq.emplace_back(e, dh);
        layer.wk.emplace_back(e, dh);
        layer.wv.emplace_back(e, dh);
        fill_uniform(layer.wq.back(), rng, attn_bound);
        fill_uniform(layer.wk.back(), rng, attn_bound);
        fill_uniform(layer.wv.back(), rng, attn_bound);
      }
      layer.wo = Mat<T>(e, e);
      fill_uniform(layer.wo, rng, std::sqrt(6.0 / static_cast<double>(2 * e)));
      layer.ffn_w1 = Mat<T>(e, ff);
      layer.ffn_b1 = Mat<T>(1, ff);
      layer.ffn_w2 = Mat<T>(ff, e);
      layer.ffn_b2 = Mat<T>(1, e);
      fill_uniform(layer.ffn_w1, rng, std::sqrt(6.0 / static_cast<double>(e + ff)));
      fill_uniform(layer.ffn_w2, rng, std::sqrt(6.0 / static_cast<double>(e + ff)));
      layer.ln1_gain = Mat<T>(1, e);
      layer.ln1_bias = Mat<T>(1, e);
      layer.ln2_gain = Mat<T>(1, e);
      layer.ln2_bias = Mat<T>(1, e);
      for (auto& v : layer.ln1_gain.data) v = T(1);
      for (auto& v : layer.ln2_gain.data) v = T(1);
    }
    return stack;
  };
  p.instr_layers = make_stack(cfg.layers);
  p.block_layers = make_stack(cfg.layers);

  p.head_w1 = Mat<T>(e, hid);
  p.head_b1 = Mat<T>(1, hid);
  p.head_w2 = Mat<T>(hid, 1);
  p.head_b2 = Mat<T>(1, 1);
  fill_uniform(p.head_w1, rng, std::sqrt(6.0 / static_cast<double>(e + hid)));
  fill_uniform(p.head_w2, rng, std::sqrt(6.0 / static_cast<double>(hid + 1)));
  for (auto& v : p.head_b1.data) v = T(0.1);  // keep the hidden relu initially active
  p.head_b2.at(0, 0) = static_cast<T>(softplus_inverse(label_mean));
  return p;
}

template <typename T>
Mat<T> positional_encoding(size_t n, size_t dim) {
  Mat<T> pe(n, dim);
  for (size_t pos = 0; pos < n; ++pos) {
    for (size_t i = 0; i < dim; i += 2) {
      const double omega =
          std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(dim));
      const double angle = static_cast<double>(pos) * omega;
      pe.at(pos, i) = static_cast<T>(std::sin(angle));
      if (i + 1 < dim) pe.at(pos, i + 1) = static_cast<T>(std::cos(angle));
    }
  }
  return pe;
}

// ---------------------------------------------------------------------------
// Graph construction
// ---------------------------------------------------------------------------

namespace {

template <typename T>
struct LayerNodes {
  std::vector<typename Graph<T>::Id> wq, wk, wv;
  typename Graph<T>::Id wo{};
  typename Graph<T>::Id ffn_w1{}, ffn_b1{}, ffn_w2{}, ffn_b2{};
  typename Graph<T>::Id ln1_gain{}, ln1_bias{}, ln2_gain{}, ln2_bias{};
};

template <typename T>
struct ParamNodes {
  typename Graph<T>::Id embedding{};
  std::vector<LayerNodes<T>> instr_layers, block_layers;
  typename Graph<T>::Id head_w1{}, head_b1{}, head_w2{}, head_b2{};
};

// Binds every tensor of `params` as a graph leaf; gradient targets come from
// `grads` (null for inference).
template <typename T>
ParamNodes<T> bind_params(Graph<T>& g, const Parameters<T>& params, Parameters<T>* grads) {
  ParamNodes<T> pn;
  pn.embedding = g.param(&params.embedding, grads ? &grads->embedding : nullptr);
  auto bind_stack = [&](const std::vector<AttentionLayerParams<T>>& layers,
                        std::vector<AttentionLayerParams<T>>* glayers) {
    std::vector<LayerNodes<T>> out;
    for (size_t l = 0; l < layers.size(); ++l) {
      LayerNodes<T> ln;
      AttentionLayerParams<T>* gl = glayers ? &(*glayers)[l] : nullptr;
      for (size_t h = 0; h < layers[l].wq.size(); ++h) {
        ln.wq.push_back(g.param(&layers[l].wq[h], gl ? &gl->wq[h] : nullptr));
        ln.wk.push_back(g.param(&layers[l].wk[h], gl ? &gl->wk[h] : nullptr));
        ln.wv.push_back(g.param(&layers[l].wv[h], gl ? &gl->wv[h] : nullptr));
      }
      ln.wo = g.param(&layers[l].wo, gl ? &gl->wo : nullptr);
      ln.ffn_w1 = g.param(&layers[l].ffn_w1, gl ? &gl->ffn_w1 : nullptr);
      ln.ffn_b1 = g.param(&layers[l].ffn_b1, gl ? &gl->ffn_b1 : nullptr);
      ln.ffn_w2 = g.param(&layers[l].ffn_w2, gl ? &gl->ffn_w2 : nullptr);
      ln.ffn_b2 = g.param(&layers[l].ffn_b2, gl ? &gl->ffn_b2 : nullptr);
      ln.ln1_gain = g.param(&layers[l].ln1_gain, gl ? &gl->ln1_gain : nullptr);
      ln.ln1_bias = g.param(&layers[l].ln1_bias, gl ? &gl->ln1_bias : nullptr);
      ln.ln2_gain = g.param(&layers[l].ln2_gain, gl ? &gl->ln2_gain : nullptr);
      ln.ln2_bias = g.param(&layers[l].ln2_bias, gl ? &gl->ln2_bias : nullptr);
      out.push_back(std::move(ln));
    }
    return out;
  };
  pn.instr_layers = bind_stack(params.instr_layers, grads ? &grads->instr_layers : nullptr);
  pn.block_layers = bind_stack(params.block_layers, grads ? &grads->block_layers : nullptr);
  pn.head_w1 = g.param(&params.head_w1, grads ? &grads->head_w1 : nullptr);
  pn.head_b1 = g.param(&params.head_b1, grads ? &grads->head_b1 : nullptr);
  pn.head_w2 = g.param(&params.head_w2, grads ? &grads->head_w2 : nullptr);
  pn.head_b2 = g.param(&params.head_b2, grads ? &grads->head_b2 : nullptr);
  return pn;
}

template <typename T>
typename Graph<T>::Id graph_mha(Graph<T>& g, typename Graph<T>::Id q, typename Graph<T>::Id k,
                                typename Graph<T>::Id v, const LayerNodes<T>& layer,
                                const std::vector<uint8_t>& key_valid) {
  using Id = typename Graph<T>::Id;
  const size_t heads = layer.wq.size();
  const T inv_sqrt_d =
      T(1) / std::sqrt(static_cast<T>(g.value(layer.wq[0]).cols));
  std::vector<Id> head_outs;
  for (size_t h = 0; h < heads; ++h) {
    Id qh = g.matmul(q, layer.wq[h]);
    Id kh = g.matmul(k, layer.wk[h]);
    Id vh = g.matmul(v, layer.wv[h]);
    Id scores = g.scale(g.matmul(qh, g.transpose(kh)), inv_sqrt_d);
    Id weights = g.softmax_rows(scores, key_valid);
    head_outs.push_back(g.matmul(weights, vh));
  }
  return g.matmul(g.concat_cols(head_outs), layer.wo);
}

// MHA + residual + layer norm, FFN + residual + layer norm.
template <typename T>
typename Graph<T>::Id graph_encoder_layer(Graph<T>& g, typename Graph<T>::Id x,
                                          typename Graph<T>::Id kv, const LayerNodes<T>& layer,
                                          const std::vector<uint8_t>& key_valid) {
  using Id = typename Graph<T>::Id;
  Id attn = graph_mha(g, x, kv, kv, layer, key_valid);
  Id x1 = g.layer_norm_rows(g.add(x, attn), layer.ln1_gain, layer.ln1_bias);
  Id hidden = g.relu(g.add_row_broadcast(g.matmul(x1, layer.ffn_w1), layer.ffn_b1));
  Id ffn = g.add_row_broadcast(g.matmul(hidden, layer.ffn_w2), layer.ffn_b2);
  return g.layer_norm_rows(g.add(x1, ffn), layer.ln2_gain, layer.ln2_bias);
}

template <typename T>
struct ClipGraphContext {
  Graph<T>* g = nullptr;
  const ParamNodes<T>* pn = nullptr;
  const ModelConfig* cfg = nullptr;
  uint32_t pad_index = 0;
  // Instructions with identical token rows share one encoder subgraph; the
  // tape accumulates their gradients through the shared node.
  std::map<std::vector<uint32_t>, typename Graph<T>::Id> memo;
};

template <typename T>
typename Graph<T>::Id encode_instruction_node(ClipGraphContext<T>& ctx,
                                              std::span<const uint32_t> row) {
  std::vector<uint32_t> key(row.begin(), row.end());
  auto it = ctx.memo.find(key);
  if (it != ctx.memo.end()) return it->second;

  Graph<T>& g = *ctx.g;
  std::vector<uint8_t> valid(row.size());
  for (size_t i = 0; i < row.size(); ++i) valid[i] = row[i] != ctx.pad_index;
  auto x = g.gather_rows(ctx.pn->embedding, key);
  for (const auto& layer : ctx.pn->instr_layers) x = graph_encoder_layer(g, x, x, layer, valid);
  auto rt = g.select_row(x, 0);  // REP position
  ctx.memo.emplace(std::move(key), rt);
  return rt;
}

template <typename T>
typename Graph<T>::Id build_clip_graph(ClipGraphContext<T>& ctx, const tok::EncodedClip& clip) {
  using Id = typename Graph<T>::Id;
  Graph<T>& g = *ctx.g;
  const ModelConfig& cfg = *ctx.cfg;
  if (clip.n == 0) throw ShapeError("clip has no instructions");
  if (clip.n > cfg.l_clip_max) throw ShapeError("clip longer than l_clip_max");
  if (clip.l_token != cfg.l_token) throw ShapeError("clip l_token does not match model config");
  if (clip.context.size() != cfg.context_rows)
    throw ShapeError("context rows do not match model config");

  std::vector<Id> rep_rows;
  rep_rows.reserve(clip.n);
  for (uint32_t i = 0; i < clip.n; ++i)
    rep_rows.push_back(encode_instruction_node(ctx, clip.row(i)));
  Id t_matrix = g.stack_rows(rep_rows);  // N x E, row i = RT_i
  Id t_pe = g.add_const(t_matrix,
                        positional_encoding<T>(clip.n, static_cast<size_t>(cfg.embed_dim)));

  Id hidden = g.gather_rows(ctx.pn->embedding, clip.context);  // M x E
  const std::vector<uint8_t> all_valid(clip.n, uint8_t(1));
  for (const auto& layer : ctx.pn->block_layers)
    hidden = graph_encoder_layer(g, hidden, t_pe, layer, all_valid);

  Id h1 = g.relu(g.add_row_broadcast(g.matmul(hidden, ctx.pn->head_w1), ctx.pn->head_b1));
  Id scalar_rows = g.add_row_broadcast(g.matmul(h1, ctx.pn->head_w2), ctx.pn->head_b2);  // M x 1
  return g.softplus(g.mean_all(scalar_rows));
}

}  // namespace

template <typename T>
T forward_clip(const tok::EncodedClip& clip, const Parameters<T>& params, const ModelConfig& cfg) {
  Graph<T> g;
  ParamNodes<T> pn = bind_params<T>(g, params, nullptr);
  ClipGraphContext<T> ctx{&g, &pn, &cfg, tok::Vocabulary::build().pad_index(), {}};
  auto pred = build_clip_graph(ctx, clip);
  const T out = g.value(pred).at(0, 0);
  if (!std::isfinite(out)) throw NonFiniteError("forward_clip produced a non-finite prediction");
  return out;
}

template <typename T>
std::vector<T> predict_clips(std::span<const tok::EncodedClip> clips, const Parameters<T>& params,
                             const ModelConfig& cfg) {
  std::vector<T> out;
  out.reserve(clips.size());
  const uint32_t pad = tok::Vocabulary::build().pad_index();
  // Clips are grouped per tape so repeated instructions share encoder work;
  // each prediction is independent of its group.
  constexpr size_t kChunk = 16;
  for (size_t base = 0; base < clips.size(); base += kChunk) {
    Graph<T> g;
    ParamNodes<T> pn = bind_params<T>(g, params, nullptr);
    ClipGraphContext<T> ctx{&g, &pn, &cfg, pad, {}};
    const size_t end = std::min(base + kChunk, clips.size());
    for (size_t i = base; i < end; ++i) {
      auto pred = build_clip_graph(ctx, clips[i]);
      const T v = g.value(pred).at(0, 0);
      if (!std::isfinite(v)) throw NonFiniteError("prediction is not finite");
      out.push_back(v);
    }
  }
  return out;
}

double mape_loss(double prediction, double fact) {
  if (!(fact > 0.0)) throw DomainError("mape_loss requires fact > 0");
  return std::abs(prediction - fact) / fact;
}

template <typename T>
T batch_loss(std::span<const tok::EncodedClip> batch, const Parameters<T>& params,
             const ModelConfig& cfg) {
  if (batch.empty()) throw ShapeError("batch_loss requires a non-empty batch");
  Graph<T> g;
  ParamNodes<T> pn = bind_params<T>(g, params, nullptr);
  ClipGraphContext<T> ctx{&g, &pn, &cfg, tok::Vocabulary::build().pad_index(), {}};
  std::vector<typename Graph<T>::Id> losses;
  for (const auto& clip : batch) {
    auto pred = build_clip_graph(ctx, clip);
    losses.push_back(g.mape(pred, static_cast<T>(clip.label)));
  }
  return g.value(g.add_scaled(losses, T(1) / static_cast<T>(batch.size()))).at(0, 0);
}

template <typename T>
T compute_gradients(std::span<const tok::EncodedClip> batch, const Parameters<T>& params,
                    Parameters<T>& grads, const ModelConfig& cfg) {
  if (batch.empty()) throw ShapeError("compute_gradients requires a non-empty batch");
  grads.for_each([](const std::string&, Mat<T>& g) { g.zero(); });
  Graph<T> g;
  ParamNodes<T> pn = bind_params<T>(g, params, &grads);
  ClipGraphContext<T> ctx{&g, &pn, &cfg, tok::Vocabulary::build().pad_index(), {}};
  std::vector<typename Graph<T>::Id> losses;
  for (const auto& clip : batch) {
    auto pred = build_clip_graph(ctx, clip);
    losses.push_back(g.mape(pred, static_cast<T>(clip.label)));
  }
  auto loss = g.add_scaled(losses, T(1) / static_cast<T>(batch.size()));
  g.backward(loss);
  grads.for_each([](const std::string& name, Mat<T>& gm) {
    for (const auto& v : gm.data)
      if (!std::isfinite(v))
        throw NonFiniteGradError("non-finite gradient in tensor " + name);
  });
  const T lv = g.value(loss).at(0, 0);
  if (!std::isfinite(lv)) throw NonFiniteGradError("non-finite batch loss");
  return lv;
}

template <typename T>
TrainState<T> make_train_state(const Parameters<T>& params, T learning_rate, T momentum) {
  TrainState<T> st;
  st.learning_rate = learning_rate;
  st.momentum = momentum;
  st.velocity = Parameters<T>::zeros_like(params);
  st.grads = Parameters<T>::zeros_like(params);
  return st;
}

template <typename T>
T train_step(std::span<const tok::EncodedClip> batch, Parameters<T>& params, TrainState<T>& state,
             const ModelConfig& cfg) {
  const T loss = compute_gradients(batch, params, state.grads, cfg);

  // v <- mu*v + g ; p <- p - lr*v
  std::vector<Mat<T>*> pm, vm, gm;
  params.for_each([&](const std::string&, Mat<T>& m) { pm.push_back(&m); });
  state.velocity.for_each([&](const std::string&, Mat<T>& m) { vm.push_back(&m); });
  state.grads.for_each([&](const std::string&, Mat<T>& m) { gm.push_back(&m); });
  for (size_t t = 0; t < pm.size(); ++t) {
    Mat<T>& p = *pm[t];
    Mat<T>& v = *vm[t];
    Mat<T>& gr = *gm[t];
    for (size_t i = 0; i < p.size(); ++i) {
      v.data[i] = state.momentum * v.data[i] + gr.data[i];
      p.data[i] -= state.learning_rate * v.data[i];
    }
  }
  ++state.step;
  return loss;
}

template <typename T>
EvalStats evaluate(std::span<const tok::EncodedClip> clips, const Parameters<T>& params,
                   const ModelConfig& cfg) {
  EvalStats stats;
  auto preds = predict_clips(clips, params, cfg);
  stats.predictions.reserve(preds.size());
  stats.per_clip_mape.reserve(preds.size());
  double sum = 0.0;
  for (size_t i = 0; i < preds.size(); ++i) {
    const double p = static_cast<double>(preds[i]);
    const double m = mape_loss(p, clips[i].label);
    stats.predictions.push_back(p);
    stats.per_clip_mape.push_back(m);
    sum += m;
  }
  stats.mean_mape = preds.empty() ? 0.0 : sum / static_cast<double>(preds.size());
  return stats;
}

AggregateResult predict_benchmark(
    const std::vector<std::pair<std::string, double>>& clip_predictions,
    const std::map<std::string, IntervalMeta>& intervals) {
  std::map<std::string, size_t> seen;
  AggregateResult res;
  for (const auto& [interval_id, meta] : intervals) {
    if (meta.clip_count == 0)
      throw MissingClipError("interval " + interval_id + " has no clips");
    res.interval_totals[interval_id] = 0.0;
  }
  for (const auto& [interval_id, pred] : clip_predictions) {
    auto it = intervals.find(interval_id);
    if (it == intervals.end())
      throw MissingClipError("prediction for unknown interval " + interval_id);
    res.interval_totals[interval_id] += pred;
    ++seen[interval_id];
  }
  for (const auto& [interval_id, meta] : intervals) {
    if (seen[interval_id] != meta.clip_count)
      throw MissingClipError("interval " + interval_id + " expected " +
                             std::to_string(meta.clip_count) + " clip predictions, got " +
                             std::to_string(seen[interval_id]));
  }
  for (const auto& [interval_id, meta] : intervals) {
    res.benchmark_totals[meta.benchmark] +=
        res.interval_totals[interval_id] * static_cast<double>(meta.multiplicity);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'C', 'A', 'P', 'S', 'I', 'M', 'C', 'K'};

json config_to_json(const ModelConfig& cfg) {
  return json{{"embed_dim", cfg.embed_dim},
              {"heads", cfg.heads},
              {"layers", cfg.layers},
              {"ffn_multiplier", cfg.ffn_multiplier},
              {"mlp_hidden", cfg.mlp_hidden},
              {"l_token", cfg.l_token},
              {"l_clip_max", cfg.l_clip_max},
              {"context_rows", cfg.context_rows},
              {"vocab_size", cfg.vocab_size},
              {"seed", cfg.seed},
              {"precision", cfg.precision == Precision::Double ? "double" : "single"}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig cfg;
  cfg.embed_dim = j.at("embed_dim").get<int>();
  cfg.heads = j.at("heads").get<int>();
  cfg.layers = j.at("layers").get<int>();
  cfg.ffn_multiplier = j.at("ffn_multiplier").get<int>();
  cfg.mlp_hidden = j.at("mlp_hidden").get<int>();
  cfg.l_token = j.at("l_token").get<uint32_t>();
  cfg.l_clip_max = j.at("l_clip_max").get<uint32_t>();
  cfg.context_rows = j.at("context_rows").get<uint32_t>();
  cfg.vocab_size = j.at("vocab_size").get<size_t>();
  cfg.seed = j.at("seed").get<uint64_t>();
  cfg.precision =
      j.at("precision").get<std::string>() == "double" ? Precision::Double : Precision::Single;
  return cfg;
}

json read_checkpoint_header(std::ifstream& in, const std::filesystem::path& path) {
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0)
    throw ValidationError("not a capsim checkpoint: " + path.string());
  uint64_t header_len = 0;
  in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
  if (!in || header_len > (1u << 26)) throw ParseError("bad checkpoint header length");
  std::string header_text(header_len, '\0');
  in.read(header_text.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw ParseError("truncated checkpoint header");
  return json::parse(header_text);
}

template <typename T>
const char* dtype_name() {
  return sizeof(T) == 8 ? "f64" : "f32";
}

}  // namespace

CheckpointHeader peek_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("cannot open checkpoint: " + path.string());
  json h = read_checkpoint_header(in, path);
  CheckpointHeader out;
  out.format_version = h.at("format_version").get<int>();
  out.config = config_from_json(h.at("model"));
  out.vocab_version = h.at("vocab_version").get<std::string>();
  out.vocab_hash = parse_hex(h.at("vocab_hash").get<std::string>());
  return out;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg,
                     const tok::Vocabulary& vocab, const Parameters<T>& params) {
  json tensors = json::array();
  uint64_t offset = 0;
  params.for_each([&](const std::string& name, const Mat<T>& m) {
    tensors.push_back(json{{"name", name}, {"rows", m.rows}, {"cols", m.cols}, {"offset", offset}});
    offset += m.size() * sizeof(T);
  });
  json header;
  header["format_version"] = 1;
  header["model"] = config_to_json(cfg);
  header["vocab_version"] = vocab.version();
  header["vocab_hash"] = "0x" + to_hex(vocab.hash(), 16);
  header["dtype"] = dtype_name<T>();
  header["tensors"] = tensors;
  const std::string header_text = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint: " + path.string());
  out.write(kMagic, 8);
  const uint64_t header_len = header_text.size();
  out.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
  out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
  params.for_each([&](const std::string&, const Mat<T>& m) {
    out.write(reinterpret_cast<const char*>(m.data.data()),
              static_cast<std::streamsize>(m.size() * sizeof(T)));
  });
  if (!out) throw IoError("checkpoint write failed: " + path.string());
}

template <typename T>
Parameters<T> load_checkpoint(const std::filesystem::path& path, const tok::Vocabulary& vocab,
                              ModelConfig* cfg_out) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("cannot open checkpoint: " + path.string());
  json header = read_checkpoint_header(in, path);
  if (parse_hex(header.at("vocab_hash").get<std::string>()) != vocab.hash())
    throw ValidationError("checkpoint vocabulary hash mismatch: " + path.string());
  if (header.at("dtype").get<std::string>() != dtype_name<T>())
    throw ValidationError("checkpoint dtype mismatch: " + path.string());
  ModelConfig cfg = config_from_json(header.at("model"));
  if (cfg_out) *cfg_out = cfg;

  Parameters<T> params = init_parameters<T>(cfg, 1.0);
  std::unordered_map<std::string, Mat<T>*> by_name;
  params.for_each([&](const std::string& name, Mat<T>& m) { by_name[name] = &m; });
  size_t loaded = 0;
  for (const auto& t : header.at("tensors")) {
    const std::string name = t.at("name").get<std::string>();
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw ValidationError("checkpoint tensor " + name + " has no slot in this model");
    Mat<T>& m = *it->second;
    if (m.rows != t.at("rows").get<size_t>() || m.cols != t.at("cols").get<size_t>())
      throw ValidationError("checkpoint tensor " + name + " shape mismatch");
    in.read(reinterpret_cast<char*>(m.data.data()),
            static_cast<std::streamsize>(m.size() * sizeof(T)));
    if (!in) throw ParseError("truncated checkpoint data for tensor " + name);
    ++loaded;
  }
  if (loaded != by_name.size())
    throw ValidationError("checkpoint is missing " + std::to_string(by_name.size() - loaded) +
                          " tensors");
  return params;
}

// Explicit instantiations.
#define CAPSIM_INSTANTIATE(T)                                                                   \
  template Parameters<T> init_parameters<T>(const ModelConfig&, double);                        \
  template Mat<T> positional_encoding<T>(size_t, size_t);                                       \
  template T forward_clip<T>(const tok::EncodedClip&, const Parameters<T>&, const ModelConfig&); \
  template std::vector<T> predict_clips<T>(std::span<const tok::EncodedClip>,                   \
                                           const Parameters<T>&, const ModelConfig&);           \
  template T batch_loss<T>(std::span<const tok::EncodedClip>, const Parameters<T>&,             \
                           const ModelConfig&);                                                 \
  template T compute_gradients<T>(std::span<const tok::EncodedClip>, const Parameters<T>&,      \
                                  Parameters<T>&, const ModelConfig&);                          \
  template TrainState<T> make_train_state<T>(const Parameters<T>&, T, T);                       \
  template T train_step<T>(std::span<const tok::EncodedClip>, Parameters<T>&, TrainState<T>&,   \
                           const ModelConfig&);                                                 \
  template EvalStats evaluate<T>(std::span<const tok::EncodedClip>, const Parameters<T>&,       \
                                 const ModelConfig&);                                           \
  template void save_checkpoint<T>(const std::filesystem::path&, const ModelConfig&,            \
                                   const tok::Vocabulary&, const Parameters<T>&);               \
  template Parameters<T> load_checkpoint<T>(const std::filesystem::path&,                       \
                                            const tok::Vocabulary&, ModelConfig*);

CAPSIM_INSTANTIATE(float)
CAPSIM_INSTANTIATE(double)

#undef CAPSIM_INSTANTIATE

}  // namespace capsim::predictor
