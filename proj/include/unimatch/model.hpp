#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "unimatch/datamodel.hpp"
#include "unimatch/nn.hpp"
#include "unimatch/params.hpp"
#include "unimatch/rng.hpp"

namespace unimatch {

struct ToyNetSpec {
  std::vector<int> widths = {16, 32, 64};
  int decoder_width = 16;
  int num_classes = 3;

  friend bool operator==(const ToyNetSpec&, const ToyNetSpec&) = default;
};

inline void to_json(json& j, const ToyNetSpec& s) {
  j = json{{"widths", s.widths}, {"decoder_width", s.decoder_width}, {"num_classes", s.num_classes}};
}
inline void from_json(const json& j, ToyNetSpec& s) {
  j.at("widths").get_to(s.widths);
  j.at("decoder_width").get_to(s.decoder_width);
  j.at("num_classes").get_to(s.num_classes);
}

inline ToyNetSpec toy_spec(const TrainConfig& c) {
  return {c.model.widths, c.model.decoder_width, c.data.num_classes};
}

// ---------------------------------------------------------------------------
// Encoder: strided conv stages; emits the first and the last stage outputs.

struct EncoderCache {
  struct Stage {
    nn::ConvCache down, conv;
    nn::GroupNormCache n1, n2;
    FloatTensor a1, a2;
  };
  std::vector<Stage> stages;
};

class ToyEncoder {
 public:
  ToyEncoder() = default;
  ToyEncoder(const ToyNetSpec& spec, Rng& rng) {
    std::size_t cin = 3;
    for (std::size_t s = 0; s < spec.widths.size(); ++s) {
      const auto w = static_cast<std::size_t>(spec.widths[s]);
      const std::string p = "encoder.stage" + std::to_string(s);
      stages_.push_back({nn::Conv2d(p + ".down", ParamGroup::encoder, cin, w, 3, 2, 1, rng),
                         nn::GroupNorm(p + ".norm1", ParamGroup::encoder, w, nn::default_groups(w)),
                         nn::Conv2d(p + ".conv", ParamGroup::encoder, w, w, 3, 1, 1, rng),
                         nn::GroupNorm(p + ".norm2", ParamGroup::encoder, w, nn::default_groups(w))});
      cin = w;
    }
  }

  /// Input H and W must be multiples of this.
  std::size_t granularity() const { return std::size_t{1} << stages_.size(); }

  FeatureVolume forward(const FloatTensor& x, EncoderCache* cache) const {
    require(x.dim(2) % granularity() == 0 && x.dim(3) % granularity() == 0,
            "encoder input " + shape_str(x.shape()) + " not a multiple of granularity " +
                std::to_string(granularity()));
    if (cache) cache->stages.assign(stages_.size(), {});
    FeatureVolume out;
    FloatTensor h = x;
    for (std::size_t s = 0; s < stages_.size(); ++s) {
      auto* c = cache ? &cache->stages[s] : nullptr;
      const auto& st = stages_[s];
      FloatTensor a1 = st.norm1.forward(st.down.forward(h, c ? &c->down : nullptr), c ? &c->n1 : nullptr);
      nn::relu_inplace(a1);
      FloatTensor a2 = st.norm2.forward(st.conv.forward(a1, c ? &c->conv : nullptr), c ? &c->n2 : nullptr);
      nn::relu_inplace(a2);
      if (c) {
        c->a1 = a1;
        c->a2 = a2;
      }
      if (s == 0) out.levels.push_back(a2);
      h = std::move(a2);
    }
    out.levels.push_back(std::move(h));
    return out;
  }

  /// Accumulates parameter gradients; a frozen encoder does nothing.
  void backward(EncoderCache& cache, const FeatureVolume& dfeat) {
    if (frozen_) return;
    require(dfeat.levels.size() == 2 && cache.stages.size() == stages_.size(),
            "encoder backward: expected two feature-level gradients");
    FloatTensor d = dfeat.levels[1];
    for (std::size_t s = stages_.size(); s-- > 0;) {
      auto& c = cache.stages[s];
      auto& st = stages_[s];
      if (s == 0) add_into(d, dfeat.levels[0]);
      nn::relu_backward_inplace(c.a2, d);
      FloatTensor d1 = st.conv.backward(c.conv, st.norm2.backward(c.n2, d), true);
      nn::relu_backward_inplace(c.a1, d1);
      d = st.down.backward(c.down, st.norm1.backward(c.n1, d1), s > 0);
    }
  }

  void set_frozen(bool frozen) {
    frozen_ = frozen;
    for (auto* p : parameters()) p->trainable = !frozen;
  }
  bool frozen() const { return frozen_; }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out;
    for (auto& st : stages_)
      for (auto ps : {st.down.parameters(), st.norm1.parameters(), st.conv.parameters(), st.norm2.parameters()})
        out.insert(out.end(), ps.begin(), ps.end());
    return out;
  }
  std::vector<const Parameter*> parameters() const {
    auto ps = const_cast<ToyEncoder*>(this)->parameters();
    return {ps.begin(), ps.end()};
  }

 private:
  struct Stage {
    nn::Conv2d down;
    nn::GroupNorm norm1;
    nn::Conv2d conv;
    nn::GroupNorm norm2;
  };

  std::vector<Stage> stages_;
  bool frozen_ = false;
};

// ---------------------------------------------------------------------------
// Decoder: lateral 1x1 projections, upsample-and-add fusion, 3x3 refinement,
// 1x1 classifier, bilinear upsampling to the input resolution.

struct DecoderCache {
  nn::ConvCache lat1, lat2, fuse, cls;
  nn::GroupNormCache norm;
  Shape level1_shape, level2_shape;
  FloatTensor act;
  std::size_t out_h = 0, out_w = 0;
};

class ToyDecoder {
 public:
  ToyDecoder() = default;
  ToyDecoder(const ToyNetSpec& spec, Rng& rng) {
    const auto d = static_cast<std::size_t>(spec.decoder_width);
    const auto w1 = static_cast<std::size_t>(spec.widths.front());
    const auto wl = static_cast<std::size_t>(spec.widths.back());
    lat1_ = nn::Conv2d("decoder.lateral1", ParamGroup::decoder, w1, d, 1, 1, 0, rng);
    lat2_ = nn::Conv2d("decoder.lateral2", ParamGroup::decoder, wl, d, 1, 1, 0, rng);
    fuse_ = nn::Conv2d("decoder.fuse", ParamGroup::decoder, d, d, 3, 1, 1, rng);
    norm_ = nn::GroupNorm("decoder.norm", ParamGroup::decoder, d, nn::default_groups(d));
    cls_ = nn::Conv2d("decoder.classifier", ParamGroup::decoder, d, static_cast<std::size_t>(spec.num_classes), 1,
                      1, 0, rng);
    num_classes_ = static_cast<std::size_t>(spec.num_classes);
  }

  std::size_t num_classes() const { return num_classes_; }

  /// Activations right before the classifier, at level-1 resolution.
  FloatTensor features(const FeatureVolume& fv, DecoderCache* c) const {
    require(fv.levels.size() == 2, "decoder expects two feature levels");
    const auto& l1 = fv.levels[0];
    const auto& l2 = fv.levels[1];
    FloatTensor p1 = lat1_.forward(l1, c ? &c->lat1 : nullptr);
    FloatTensor p2 = lat2_.forward(l2, c ? &c->lat2 : nullptr);
    nn::BilinearResize up(l2.dim(2), l2.dim(3), l1.dim(2), l1.dim(3));
    add_into(p1, up.forward(p2));
    FloatTensor act = norm_.forward(fuse_.forward(p1, c ? &c->fuse : nullptr), c ? &c->norm : nullptr);
    nn::relu_inplace(act);
    if (c) {
      c->level1_shape = l1.shape();
      c->level2_shape = l2.shape();
      c->act = act;
    }
    return act;
  }

  Logits classify(const FloatTensor& act, std::size_t out_h, std::size_t out_w, DecoderCache* c) const {
    FloatTensor low = cls_.forward(act, c ? &c->cls : nullptr);
    if (c) c->out_h = out_h, c->out_w = out_w;
    Logits out = nn::BilinearResize(low.dim(2), low.dim(3), out_h, out_w).forward(low);
    require(out.dim(2) == out_h && out.dim(3) == out_w, "decoder output resolution mismatch");
    return out;
  }

  FloatTensor backward_classify(DecoderCache& c, const Logits& dlogits) {
    const std::size_t h = c.act.dim(2), w = c.act.dim(3);
    FloatTensor dlow = nn::BilinearResize(h, w, c.out_h, c.out_w).backward(dlogits);
    return cls_.backward(c.cls, dlow, true);
  }

  FeatureVolume backward_features(DecoderCache& c, FloatTensor dact) {
    nn::relu_backward_inplace(c.act, dact);
    FloatTensor ds = fuse_.backward(c.fuse, norm_.backward(c.norm, dact), true);
    nn::BilinearResize up(c.level2_shape[2], c.level2_shape[3], c.level1_shape[2], c.level1_shape[3]);
    FeatureVolume out;
    out.levels.push_back(lat1_.backward(c.lat1, ds, true));
    out.levels.push_back(lat2_.backward(c.lat2, up.backward(ds), true));
    return out;
  }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out;
    for (auto ps : {lat1_.parameters(), lat2_.parameters(), fuse_.parameters(), norm_.parameters(),
                    cls_.parameters()})
      out.insert(out.end(), ps.begin(), ps.end());
    return out;
  }
  std::vector<const Parameter*> parameters() const {
    auto ps = const_cast<ToyDecoder*>(this)->parameters();
    return {ps.begin(), ps.end()};
  }

 private:
  nn::Conv2d lat1_, lat2_, fuse_, cls_;
  nn::GroupNorm norm_;
  std::size_t num_classes_ = 0;
};

// ---------------------------------------------------------------------------

/// Encoder g + decoder h. Any pair exposing the ToyEncoder/ToyDecoder
/// surface (forward/backward with caches, parameters()) plugs in.
template <typename Encoder, typename Decoder>
class SegModel {
 public:
  using EncoderType = Encoder;
  using DecoderType = Decoder;

  SegModel() = default;
  SegModel(Encoder e, Decoder d) : encoder(std::move(e)), decoder(std::move(d)) {}

  /// Inference forward (no caches, no perturbation).
  Logits forward(const FloatTensor& x) const {
    const FeatureVolume fv = encoder.forward(x, nullptr);
    return decoder.classify(decoder.features(fv, nullptr), x.dim(2), x.dim(3), nullptr);
  }

  std::size_t granularity() const { return encoder.granularity(); }
  std::size_t num_classes() const { return decoder.num_classes(); }

  std::vector<Parameter*> parameters() {
    auto out = encoder.parameters();
    auto d = decoder.parameters();
    out.insert(out.end(), d.begin(), d.end());
    return out;
  }
  std::vector<const Parameter*> parameters() const {
    auto out = encoder.parameters();
    auto d = decoder.parameters();
    out.insert(out.end(), d.begin(), d.end());
    return out;
  }

  Encoder encoder;
  Decoder decoder;
};

using ToyModel = SegModel<ToyEncoder, ToyDecoder>;

inline ToyModel build_toy_model(const ToyNetSpec& spec, Rng& rng) {
  if (spec.widths.size() < 2) throw ConfigError("toy model needs at least two stages");
  for (int w : spec.widths)
    if (w < 4) throw ConfigError("toy model widths must be >= 4");
  if (spec.decoder_width < 4) throw ConfigError("toy model decoder width must be >= 4");
  if (spec.num_classes < 2) throw ConfigError("toy model needs >= 2 classes");
  ToyEncoder enc(spec, rng);
  ToyDecoder dec(spec, rng);
  return ToyModel(std::move(enc), std::move(dec));
}

template <typename Encoder>
Encoder& set_frozen(Encoder& encoder, bool frozen) {
  encoder.set_frozen(frozen);
  return encoder;
}

struct ParameterGroups {
  std::vector<Parameter*> encoder;
  std::vector<Parameter*> decoder;
};

/// Trainable parameters split by their encoder/decoder tag.
template <ParameterTree Model>
ParameterGroups parameter_groups(Model& model) {
  ParameterGroups g;
  for (auto* p : model.parameters()) {
    if (p->kind != ParamKind::parameter) continue;
    if (p->group == ParamGroup::untagged) throw ContractError("parameter '" + p->name + "' has no group tag");
    if (!p->trainable) continue;
    (p->group == ParamGroup::encoder ? g.encoder : g.decoder).push_back(p);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Checkpoints
//
//   bytes 0..7    magic "UMCKPT01"
//   bytes 8..15   header length L (uint64, little endian)
//   next L bytes  JSON header: caller metadata plus
//                 "tensors": [{"name", "shape", "kind"}...] in tree order
//   remainder     float32 little-endian values, tensors back to back

inline constexpr char kCheckpointMagic[9] = "UMCKPT01";

template <ParameterTree Model>
void save_checkpoint(const std::filesystem::path& path, const Model& model, json meta) {
  static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little endian");
  json tensors = json::array();
  for (const auto* p : model.parameters())
    tensors.push_back({{"name", p->name},
                       {"shape", p->value.shape()},
                       {"kind", p->kind == ParamKind::buffer ? "buffer" : "parameter"}});
  meta["tensors"] = std::move(tensors);
  const std::string header = meta.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out.write(kCheckpointMagic, 8);
  const std::uint64_t len = header.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (const auto* p : model.parameters())
    out.write(reinterpret_cast<const char*>(p->value.data()),
              static_cast<std::streamsize>(p->value.size() * sizeof(float)));
  if (!out) throw std::runtime_error("failed writing checkpoint " + path.string());
}

inline json read_checkpoint_header(std::ifstream& in, const std::filesystem::path& path) {
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw std::runtime_error(path.string() + ": not a checkpoint");
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string header(len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(len));
  if (!in) throw std::runtime_error(path.string() + ": truncated checkpoint header");
  return json::parse(header);
}

/// Reads only the metadata (e.g. to rebuild the model before loading).
inline json checkpoint_metadata(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  return read_checkpoint_header(in, path);
}

/// Loads values into `model`, whose tree must match the stored one.
template <ParameterTree Model>
json load_checkpoint(const std::filesystem::path& path, Model& model) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  json meta = read_checkpoint_header(in, path);
  const auto& tensors = meta.at("tensors");
  auto params = model.parameters();
  if (tensors.size() != params.size()) throw std::runtime_error(path.string() + ": parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (tensors[i].at("name").get<std::string>() != params[i]->name ||
        tensors[i].at("shape").get<Shape>() != params[i]->value.shape())
      throw std::runtime_error(path.string() + ": tensor '" + params[i]->name + "' does not match model");
    in.read(reinterpret_cast<char*>(params[i]->value.data()),
            static_cast<std::streamsize>(params[i]->value.size() * sizeof(float)));
  }
  if (!in) throw std::runtime_error(path.string() + ": truncated checkpoint data");
  return meta;
}

}  // namespace unimatch
