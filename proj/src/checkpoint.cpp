#include "fusion/checkpoint.h"

#include "json.hpp"

#include <cstring>
#include <fstream>

namespace fusion {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'F', 'S', 'N', 'C', 'K', 'P', 'T', '\0'};
constexpr std::uint32_t kVersion = 1;

void write_blob(std::ofstream& out, const Eigen::VectorXf& v) {
  out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(sizeof(float) * v.size()));
}

Eigen::VectorXf read_blob(std::ifstream& in, std::size_t n) {
  Eigen::VectorXf v(static_cast<Eigen::Index>(n));
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(sizeof(float) * n));
  if (!in) {
    throw Error(ErrorCode::IoError, "truncated checkpoint");
  }
  return v;
}

} // namespace

Denoiser Checkpoint::model() const {
  Denoiser m(config);
  if (static_cast<std::size_t>(params.size()) != m.param_count()) {
    throw Error(ErrorCode::ShapeMismatch, "checkpoint parameters do not match its configuration");
  }
  m.params() = params;
  return m;
}

NoiseSchedule Checkpoint::schedule() const {
  return make_schedule(schedule_T, schedule_kind);
}

Checkpoint checkpoint_from_state(const TrainState& state, const NoiseSchedule& schedule, const SkeletonSpec& skel,
                                 std::uint64_t train_seed) {
  Checkpoint c;
  c.config = state.model.config();
  c.params = state.model.params();
  c.schedule_T = schedule.T;
  c.schedule_kind = schedule.kind;
  c.skeleton = skel;
  c.step = state.step;
  c.train_seed = train_seed;
  c.optimizer_config = state.optimizer.config();
  c.moment1 = state.optimizer.first_moment();
  c.moment2 = state.optimizer.second_moment();
  c.optimizer_steps = state.optimizer.steps();
  return c;
}

TrainState state_from_checkpoint(const Checkpoint& ckpt) {
  TrainState s;
  s.model = ckpt.model();
  s.step = ckpt.step;
  s.optimizer = Adam<float>(ckpt.optimizer_config, static_cast<Eigen::Index>(s.model.param_count()));
  if (ckpt.moment1.size() > 0) {
    s.optimizer.restore(ckpt.moment1, ckpt.moment2, ckpt.optimizer_steps);
  }
  return s;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const ParamLayout layout(ckpt.config);
  if (static_cast<std::size_t>(ckpt.params.size()) != layout.total) {
    throw Error(ErrorCode::ShapeMismatch, "parameter vector does not match the configuration");
  }
  json h;
  h["config"] = json::parse(ckpt.config.to_json());
  h["dtype"] = "float32";
  auto& tensors = h["tensors"] = json::array();
  for (const auto& t : layout.tensors) {
    tensors.push_back({{"name", t.name}, {"offset", t.offset}, {"rows", t.rows}, {"cols", t.cols}});
  }
  h["schedule"] = {{"T", ckpt.schedule_T}, {"kind", std::string(to_string(ckpt.schedule_kind))}};
  if (ckpt.skeleton) {
    h["skeleton"] = json::parse(skeleton_to_json(*ckpt.skeleton));
  }
  h["step"] = ckpt.step;
  h["train_seed"] = ckpt.train_seed;
  const bool has_opt = ckpt.moment1.size() > 0;
  const AdamConfig& oc = ckpt.optimizer_config;
  h["optimizer"] = {{"present", has_opt},        {"lr", oc.lr},   {"beta1", oc.beta1},
                    {"beta2", oc.beta2},         {"eps", oc.eps}, {"weight_decay", oc.weight_decay},
                    {"steps", ckpt.optimizer_steps}};
  const std::string header = h.dump();

  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) {
      throw Error(ErrorCode::IoError, "cannot write " + path.string());
    }
    out.write(kMagic, sizeof(kMagic));
    out.write(reinterpret_cast<const char*>(&kVersion), sizeof(kVersion));
    const std::uint64_t len = header.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    write_blob(out, ckpt.params);
    if (has_opt) {
      write_blob(out, ckpt.moment1);
      write_blob(out, ckpt.moment2);
    }
    if (!out) {
      throw Error(ErrorCode::IoError, "failed writing " + path.string());
    }
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw Error(ErrorCode::IoError, "cannot open checkpoint " + path.string());
  }
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(magic)) != 0) {
    throw Error(ErrorCode::SchemaError, path.string() + " is not a checkpoint");
  }
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in || version != kVersion || len > (1u << 26)) {
    throw Error(ErrorCode::SchemaError, "unsupported checkpoint header");
  }
  std::string header(len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(len));
  if (!in) {
    throw Error(ErrorCode::IoError, "truncated checkpoint header");
  }
  Checkpoint c;
  bool has_opt = false;
  try {
    const json h = json::parse(header);
    c.config = DenoiserConfig::from_json(h.at("config").dump());
    const ParamLayout layout(c.config);
    const auto& tensors = h.at("tensors");
    if (tensors.size() != layout.tensors.size()) {
      throw Error(ErrorCode::SchemaError, "checkpoint tensor table does not match its configuration");
    }
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      const auto& t = layout.tensors[i];
      if (tensors[i].at("name") != t.name || tensors[i].at("rows") != t.rows || tensors[i].at("cols") != t.cols ||
          tensors[i].at("offset").get<std::size_t>() != t.offset) {
        throw Error(ErrorCode::SchemaError, "checkpoint tensor '" + t.name + "' has an unexpected shape");
      }
    }
    c.schedule_T = h.at("schedule").at("T");
    c.schedule_kind = parse_schedule_kind(h.at("schedule").at("kind").get<std::string>());
    if (h.contains("skeleton")) {
      c.skeleton = skeleton_from_json(h.at("skeleton").dump());
    }
    c.step = h.value("step", 0);
    c.train_seed = h.value("train_seed", std::uint64_t{0});
    const auto& o = h.at("optimizer");
    has_opt = o.at("present");
    c.optimizer_config.lr = o.at("lr");
    c.optimizer_config.beta1 = o.at("beta1");
    c.optimizer_config.beta2 = o.at("beta2");
    c.optimizer_config.eps = o.at("eps");
    c.optimizer_config.weight_decay = o.at("weight_decay");
    c.optimizer_steps = o.at("steps");
    c.params = read_blob(in, layout.total);
    if (has_opt) {
      c.moment1 = read_blob(in, layout.total);
      c.moment2 = read_blob(in, layout.total);
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::SchemaError, std::string("checkpoint header: ") + e.what());
  }
  return c;
}

} // namespace fusion
