#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "shrinkforge/ops.hpp"
#include "shrinkforge/rng.hpp"
#include "shrinkforge/tape.hpp"
#include "shrinkforge/tensor.hpp"

namespace shrinkforge {

using json = nlohmann::json;

enum class LayerKind { Conv, Bn, Relu, AvgPool, Dense, Flatten };

inline const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::Conv: return "conv";
    case LayerKind::Bn: return "bn";
    case LayerKind::Relu: return "relu";
    case LayerKind::AvgPool: return "avgpool";
    case LayerKind::Dense: return "dense";
    case LayerKind::Flatten: return "flatten";
  }
  return "?";
}

inline LayerKind layer_kind_from(const std::string& s) {
  if (s == "conv") return LayerKind::Conv;
  if (s == "bn") return LayerKind::Bn;
  if (s == "relu") return LayerKind::Relu;
  if (s == "avgpool") return LayerKind::AvgPool;
  if (s == "dense") return LayerKind::Dense;
  if (s == "flatten") return LayerKind::Flatten;
  fail(ErrorKind::Config, "unknown layer kind '" + s + "'");
}

struct LayerSpec {
  LayerKind kind = LayerKind::Relu;
  std::string name;
  int out_channels = 0;  // conv
  int kernel = 0;        // conv
  int stride = 1;        // conv
  int padding = 0;       // conv
  int out_features = 0;  // dense

  static LayerSpec conv(std::string name, int out_channels, int kernel, int stride = 1,
                        int padding = 0) {
    LayerSpec l;
    l.kind = LayerKind::Conv;
    l.name = std::move(name);
    l.out_channels = out_channels;
    l.kernel = kernel;
    l.stride = stride;
    l.padding = padding;
    return l;
  }
  static LayerSpec plain(LayerKind kind, std::string name) {
    LayerSpec l;
    l.kind = kind;
    l.name = std::move(name);
    return l;
  }
  static LayerSpec dense(std::string name, int out_features) {
    LayerSpec l;
    l.kind = LayerKind::Dense;
    l.name = std::move(name);
    l.out_features = out_features;
    return l;
  }
};

struct NetworkSpec {
  std::vector<LayerSpec> layers;
  std::array<int, 3> input_shape{0, 0, 0};  // C,H,W
  int num_classes = 0;

  json to_json() const {
    json spec;
    spec["input_shape"] = input_shape;
    spec["num_classes"] = num_classes;
    spec["layers"] = json::array();
    for (const auto& l : layers) {
      json jl;
      jl["kind"] = to_string(l.kind);
      jl["name"] = l.name;
      if (l.kind == LayerKind::Conv) {
        jl["out_channels"] = l.out_channels;
        jl["kernel"] = l.kernel;
        jl["stride"] = l.stride;
        jl["padding"] = l.padding;
      } else if (l.kind == LayerKind::Dense) {
        jl["out_features"] = l.out_features;
      }
      spec["layers"].push_back(jl);
    }
    return spec;
  }

  static NetworkSpec from_json(const json& spec) {
    NetworkSpec out;
    try {
      out.input_shape = spec.at("input_shape").get<std::array<int, 3>>();
      out.num_classes = spec.at("num_classes").get<int>();
      for (const auto& jl : spec.at("layers")) {
        LayerSpec l;
        l.kind = layer_kind_from(jl.at("kind").get<std::string>());
        l.name = jl.at("name").get<std::string>();
        if (l.kind == LayerKind::Conv) {
          l.out_channels = jl.at("out_channels").get<int>();
          l.kernel = jl.at("kernel").get<int>();
          l.stride = jl.value("stride", 1);
          l.padding = jl.value("padding", 0);
        } else if (l.kind == LayerKind::Dense) {
          l.out_features = jl.at("out_features").get<int>();
        }
        out.layers.push_back(std::move(l));
      }
    } catch (const json::exception& e) {
      fail(ErrorKind::Config, std::string("malformed network spec: ") + e.what());
    }
    return out;
  }
};

// Resolved geometry of a validated spec.
struct LayerShape {
  std::array<std::size_t, 3> in{};   // C,H,W entering the layer
  std::array<std::size_t, 3> out{};  // C,H,W leaving the layer
  std::size_t s_out = 0;             // conv: H'*W' (kernel application count)
  std::size_t flat_features = 0;     // dense: input feature count
};

struct ShapeInfo {
  std::vector<LayerShape> per_layer;
  // Index of the conv layer feeding each layer's input channels; -1 = image.
  std::vector<int> prev_conv;
};

// Walks the layer chain, checking every operator precondition. A spec that
// validates never fails at forward time for a correctly shaped batch.
inline ShapeInfo validate(const NetworkSpec& spec) {
  require(!spec.layers.empty(), ErrorKind::Config, "spec has no layers");
  require(spec.num_classes >= 2, ErrorKind::Config, "spec needs at least 2 classes");
  for (int d : spec.input_shape)
    require(d > 0, ErrorKind::Config, "spec input_shape must be positive");
  std::map<std::string, int> seen;
  for (const auto& l : spec.layers) {
    require(!l.name.empty(), ErrorKind::Config, "layer with empty name");
    require(seen.emplace(l.name, 1).second, ErrorKind::Config,
            "duplicate layer name '" + l.name + "'");
  }

  ShapeInfo info;
  std::array<std::size_t, 3> cur{static_cast<std::size_t>(spec.input_shape[0]),
                                 static_cast<std::size_t>(spec.input_shape[1]),
                                 static_cast<std::size_t>(spec.input_shape[2])};
  bool flat = false;
  std::size_t features = 0;
  int last_conv = -1;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    LayerShape ls;
    ls.in = cur;
    info.prev_conv.push_back(last_conv);
    switch (l.kind) {
      case LayerKind::Conv: {
        require(!flat, ErrorKind::Config, l.name + ": conv after flatten");
        require(l.out_channels > 0 && l.kernel > 0 && l.stride > 0 && l.padding >= 0,
                ErrorKind::Config, l.name + ": invalid conv parameters");
        const std::size_t k = static_cast<std::size_t>(l.kernel);
        const std::size_t pad = static_cast<std::size_t>(l.padding);
        require(k <= cur[1] + 2 * pad && k <= cur[2] + 2 * pad, ErrorKind::Config,
                l.name + ": kernel " + std::to_string(l.kernel) +
                    " exceeds padded input " + std::to_string(cur[1]) + "x" +
                    std::to_string(cur[2]));
        require(i + 1 < spec.layers.size() && spec.layers[i + 1].kind == LayerKind::Bn,
                ErrorKind::Config,
                l.name + ": every conv must be immediately followed by a bn layer");
        cur[0] = static_cast<std::size_t>(l.out_channels);
        cur[1] = (cur[1] + 2 * pad - k) / static_cast<std::size_t>(l.stride) + 1;
        cur[2] = (cur[2] + 2 * pad - k) / static_cast<std::size_t>(l.stride) + 1;
        ls.s_out = cur[1] * cur[2];
        last_conv = static_cast<int>(i);
        break;
      }
      case LayerKind::Bn:
        require(!flat, ErrorKind::Config, l.name + ": bn after flatten");
        require(i > 0 && spec.layers[i - 1].kind == LayerKind::Conv, ErrorKind::Config,
                l.name + ": bn must directly follow a conv layer");
        break;
      case LayerKind::Relu:
        break;
      case LayerKind::AvgPool:
        require(!flat, ErrorKind::Config, l.name + ": avgpool after flatten");
        require(cur[1] >= 2 && cur[2] >= 2, ErrorKind::Config,
                l.name + ": avgpool needs at least 2x2 input, got " +
                    std::to_string(cur[1]) + "x" + std::to_string(cur[2]));
        cur[1] /= 2;
        cur[2] /= 2;
        break;
      case LayerKind::Flatten:
        require(!flat, ErrorKind::Config, l.name + ": repeated flatten");
        flat = true;
        features = cur[0] * cur[1] * cur[2];
        break;
      case LayerKind::Dense:
        require(flat, ErrorKind::Config, l.name + ": dense requires a preceding flatten");
        require(l.out_features > 0, ErrorKind::Config, l.name + ": invalid out_features");
        ls.flat_features = features;
        features = static_cast<std::size_t>(l.out_features);
        break;
    }
    if (flat) {
      ls.out = {features, 1, 1};
    } else {
      ls.out = cur;
    }
    info.per_layer.push_back(ls);
  }
  const LayerSpec& last = spec.layers.back();
  require(last.kind == LayerKind::Dense && last.out_features == spec.num_classes,
          ErrorKind::Config,
          "spec must end with a dense classifier of " +
              std::to_string(spec.num_classes) + " outputs");
  return info;
}

// Names of the conv layers in network order; pruning and cost accounting
// treat each conv (with its bn) as one stage.
inline std::vector<std::string> conv_stages(const NetworkSpec& spec) {
  std::vector<std::string> names;
  for (const auto& l : spec.layers)
    if (l.kind == LayerKind::Conv) names.push_back(l.name);
  return names;
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

struct ParamStore {
  std::map<std::string, Tensor> tensors;
  std::int64_t step = 0;
  std::uint64_t seed = 0;

  Tensor& at(const std::string& name) {
    auto it = tensors.find(name);
    require(it != tensors.end(), ErrorKind::Config, "unknown parameter '" + name + "'");
    return it->second;
  }
  const Tensor& at(const std::string& name) const {
    auto it = tensors.find(name);
    require(it != tensors.end(), ErrorKind::Config, "unknown parameter '" + name + "'");
    return it->second;
  }
  bool has(const std::string& name) const { return tensors.count(name) != 0; }

  // Running statistics and absorbed bias maps are buffers, not parameters.
  static bool trainable_name(const std::string& name) {
    return name.find(".running_") == std::string::npos &&
           name.find(".bias_correction") == std::string::npos;
  }
};

inline ParamStore build(const NetworkSpec& spec, std::uint64_t seed) {
  const ShapeInfo info = validate(spec);
  ParamStore store;
  store.seed = seed;
  Rng rng(seed);
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    const LayerShape& ls = info.per_layer[i];
    if (l.kind == LayerKind::Conv) {
      const std::size_t c_in = ls.in[0];
      const std::size_t k = static_cast<std::size_t>(l.kernel);
      Tensor kernel({static_cast<std::size_t>(l.out_channels), c_in, k, k});
      const double std_dev = std::sqrt(2.0 / static_cast<double>(c_in * k * k));
      for (auto& v : kernel.data) v = std_dev * rng.normal();
      store.tensors[l.name + ".kernel"] = std::move(kernel);
    } else if (l.kind == LayerKind::Bn) {
      const std::size_t c = ls.in[0];
      store.tensors[l.name + ".gamma"] = Tensor({c}, 1.0);
      store.tensors[l.name + ".beta"] = Tensor({c}, 0.0);
      store.tensors[l.name + ".running_mean"] = Tensor({c}, 0.0);
      store.tensors[l.name + ".running_var"] = Tensor({c}, 1.0);
    } else if (l.kind == LayerKind::Dense) {
      const std::size_t f = ls.flat_features;
      Tensor weight({static_cast<std::size_t>(l.out_features), f});
      const double std_dev = std::sqrt(2.0 / static_cast<double>(f));
      for (auto& v : weight.data) v = std_dev * rng.normal();
      store.tensors[l.name + ".weight"] = std::move(weight);
      store.tensors[l.name + ".bias"] =
          Tensor({static_cast<std::size_t>(l.out_features)}, 0.0);
    }
  }
  return store;
}

// The bn layer paired with a conv stage (the one that owns its gamma).
inline std::string bn_of(const NetworkSpec& spec, const std::string& conv_name) {
  for (std::size_t i = 0; i < spec.layers.size(); ++i)
    if (spec.layers[i].kind == LayerKind::Conv && spec.layers[i].name == conv_name)
      return spec.layers[i + 1].name;
  fail(ErrorKind::Config, "no conv stage named '" + conv_name + "'");
}

// ---------------------------------------------------------------------------
// Forward execution
// ---------------------------------------------------------------------------

struct TapeForward {
  Var logits;
  std::map<std::string, Var> params;  // every trainable tensor, watched
};

inline void check_batch(const NetworkSpec& spec, const Tensor& batch) {
  require(batch.rank() == 4, ErrorKind::Shape, "batch must be [N,C,H,W]");
  require(batch.dim(1) == static_cast<std::size_t>(spec.input_shape[0]) &&
              batch.dim(2) == static_cast<std::size_t>(spec.input_shape[1]) &&
              batch.dim(3) == static_cast<std::size_t>(spec.input_shape[2]),
          ErrorKind::Shape,
          "batch shape " + batch.shape_str() + " does not match spec input");
}

// Train-mode forward: records the tape, uses batch statistics in bn layers
// and updates their running stats in the store.
inline TapeForward forward_train(Tape& tape, ParamStore& store, const NetworkSpec& spec,
                                 const Tensor& batch, ForwardProbe* probe = nullptr) {
  check_batch(spec, batch);
  TapeForward fw;
  for (const auto& [name, tensor] : store.tensors)
    if (ParamStore::trainable_name(name)) fw.params[name] = tape.watch(tensor);
  Var cur = tape.watch(batch, /*needs_grad=*/false);
  for (const auto& l : spec.layers) {
    switch (l.kind) {
      case LayerKind::Conv:
        cur = conv2d(tape, cur, fw.params.at(l.name + ".kernel"), l.stride, l.padding,
                     l.name);
        if (store.has(l.name + ".bias_correction"))
          cur = add_channel_map(tape, cur, store.at(l.name + ".bias_correction"));
        break;
      case LayerKind::Bn:
        cur = batchnorm_train(tape, cur, fw.params.at(l.name + ".gamma"),
                              fw.params.at(l.name + ".beta"),
                              store.at(l.name + ".running_mean"),
                              store.at(l.name + ".running_var"));
        break;
      case LayerKind::Relu:
        cur = relu(tape, cur, probe);
        break;
      case LayerKind::AvgPool:
        cur = avgpool2(tape, cur);
        break;
      case LayerKind::Flatten:
        cur = flatten(tape, cur);
        break;
      case LayerKind::Dense:
        cur = dense(tape, cur, fw.params.at(l.name + ".weight"),
                    fw.params.at(l.name + ".bias"));
        break;
    }
  }
  fw.logits = cur;
  return fw;
}

// Eval-mode forward: pure function of (parameters, input); bn layers use
// running statistics.
inline Tensor forward_eval(const ParamStore& store, const NetworkSpec& spec,
                           const Tensor& batch, std::uint64_t* macs = nullptr,
                           ForwardProbe* probe = nullptr) {
  check_batch(spec, batch);
  Tensor cur = batch;
  for (const auto& l : spec.layers) {
    switch (l.kind) {
      case LayerKind::Conv:
        cur = conv2d_value(cur, store.at(l.name + ".kernel"), l.stride, l.padding,
                           l.name, nullptr, macs);
        if (store.has(l.name + ".bias_correction"))
          cur = add_channel_map_value(cur, store.at(l.name + ".bias_correction"));
        break;
      case LayerKind::Bn:
        cur = batchnorm_eval_value(cur, store.at(l.name + ".gamma"),
                                   store.at(l.name + ".beta"),
                                   store.at(l.name + ".running_mean"),
                                   store.at(l.name + ".running_var"), 1e-5);
        break;
      case LayerKind::Relu:
        cur = relu_value(cur, probe);
        break;
      case LayerKind::AvgPool:
        cur = avgpool2_value(cur);
        break;
      case LayerKind::Flatten:
        cur = cur.reshaped({cur.dim(0), cur.numel() / cur.dim(0)});
        break;
      case LayerKind::Dense:
        cur = dense_value(cur, store.at(l.name + ".weight"), store.at(l.name + ".bias"),
                          macs);
        break;
    }
  }
  return cur;
}

// ---------------------------------------------------------------------------
// Reference architectures
// ---------------------------------------------------------------------------

namespace detail {

inline NetworkSpec stage_stack(std::array<int, 3> input, int num_classes,
                               const std::vector<int>& channels,
                               const std::vector<bool>& pool_after) {
  NetworkSpec spec;
  spec.input_shape = input;
  spec.num_classes = num_classes;
  for (std::size_t i = 0; i < channels.size(); ++i) {
    const std::string tag = std::to_string(i + 1);
    spec.layers.push_back(LayerSpec::conv("conv" + tag, channels[i], 3, 1, 1));
    spec.layers.push_back(LayerSpec::plain(LayerKind::Bn, "bn" + tag));
    spec.layers.push_back(LayerSpec::plain(LayerKind::Relu, "relu" + tag));
    if (pool_after[i]) spec.layers.push_back(LayerSpec::plain(LayerKind::AvgPool, "pool" + tag));
  }
  spec.layers.push_back(LayerSpec::plain(LayerKind::Flatten, "flat"));
  spec.layers.push_back(LayerSpec::dense("fc", num_classes));
  return spec;
}

}  // namespace detail

// tiny3: 3 conv stages (3->16->32->64, w=3, pad 1) on 3x32x32, 2x2 avgpool
// after each stage, dense head. tiny6: 6 stages, pooling after every second.
inline NetworkSpec reference_spec(const std::string& name, int num_classes) {
  if (name == "tiny3")
    return detail::stage_stack({3, 32, 32}, num_classes, {16, 32, 64},
                               {true, true, true});
  if (name == "tiny6")
    return detail::stage_stack({3, 32, 32}, num_classes, {8, 16, 24, 32, 48, 64},
                               {false, true, false, true, false, true});
  fail(ErrorKind::Config, "unknown reference spec '" + name + "'");
}

}  // namespace shrinkforge
