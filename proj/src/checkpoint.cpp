#include "toan/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "toan/error.hpp"

namespace toan {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'T', 'O', 'A', 'N'};
constexpr const char* kOptimM = "optim/m/";
constexpr const char* kOptimV = "optim/v/";
constexpr const char* kOptimStep = "optim/step";
constexpr const char* kRunningMean = ".running_mean";
constexpr const char* kRunningVar = ".running_var";
constexpr std::uint64_t kMaxExactStep = 1ULL << 24;  // f32 holds integers exactly up to here

template <typename U>
void put(std::string& out, U value) {
  char buf[sizeof(U)];
  std::memcpy(buf, &value, sizeof(U));
  out.append(buf, sizeof(U));
}

void put_record(std::string& out, const std::string& name, const ad::Shape& shape,
                std::span<const float> values) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
  out += name;
  put<std::uint32_t>(out, static_cast<std::uint32_t>(shape.size()));
  for (std::size_t d : shape) put<std::uint64_t>(out, d);
  out.append(reinterpret_cast<const char*>(values.data()), values.size() * sizeof(float));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <typename U>
  U get() {
    need(sizeof(U));
    U value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return value;
  }

  std::string get_string(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::vector<float> get_floats(std::size_t n) {
    if (n > (bytes_.size() - pos_) / sizeof(float)) need(bytes_.size() + 1);
    std::vector<float> v(n);
    std::memcpy(v.data(), bytes_.data() + pos_, n * sizeof(float));
    pos_ += n * sizeof(float);
    return v;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (n > bytes_.size() - pos_) {
      throw Error(ErrorCode::kCheckpointMismatch, "checkpoint truncated");
    }
  }

  const std::string& bytes_;
  std::size_t pos_ = 0;
};

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

bool starts_with(const std::string& s, const std::string& prefix) {
  return s.compare(0, prefix.size(), prefix) == 0;
}

}  // namespace

std::string serialize_checkpoint(const ParameterStore<float>& store,
                                 const nlohmann::json& config) {
  if (store.adam_step() > kMaxExactStep) {
    throw Error(ErrorCode::kIoError, "optimiser step count exceeds the checkpoint range");
  }
  std::string body;
  std::uint32_t records = 0;
  for (const auto& [name, t] : store.parameters()) {
    put_record(body, name, t.shape(), t.values());
    ++records;
  }
  for (const auto& [name, s] : store.batch_norms()) {
    const ad::Shape shape{s.running_mean.size()};
    put_record(body, name + kRunningMean, shape, s.running_mean);
    put_record(body, name + kRunningVar, shape, s.running_var);
    records += 2;
  }
  for (const auto& [name, slot] : store.adam()) {
    const ad::Shape shape = store.get(name).shape();
    put_record(body, kOptimM + name, shape, slot.m);
    put_record(body, kOptimV + name, shape, slot.v);
    records += 2;
  }
  const float step = static_cast<float>(store.adam_step());
  put_record(body, kOptimStep, {}, std::span<const float>(&step, 1));
  ++records;

  std::string out(kMagic, 4);
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, records);
  out += body;
  const std::string trailer = config.dump();
  put<std::uint64_t>(out, trailer.size());
  out += trailer;
  return out;
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
  Reader in(bytes);
  if (in.get_string(4) != std::string(kMagic, 4)) {
    throw Error(ErrorCode::kCheckpointMismatch, "not a checkpoint (bad magic)");
  }
  const auto version = in.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw Error(ErrorCode::kCheckpointMismatch,
                "unsupported checkpoint version " + std::to_string(version));
  }
  const auto records = in.get<std::uint32_t>();
  Checkpoint ck;
  std::map<std::string, std::vector<float>> means, vars, ms, vs;
  for (std::uint32_t r = 0; r < records; ++r) {
    const std::string name = in.get_string(in.get<std::uint32_t>());
    const auto rank = in.get<std::uint32_t>();
    if (rank > 8) throw Error(ErrorCode::kCheckpointMismatch, "implausible rank in '" + name + "'");
    ad::Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(in.get<std::uint64_t>());
    std::vector<float> values = in.get_floats(ad::element_count(shape));
    if (name == kOptimStep) {
      ck.store.set_adam_step(static_cast<std::uint64_t>(values.at(0)));
    } else if (starts_with(name, kOptimM)) {
      ms[name.substr(std::strlen(kOptimM))] = std::move(values);
    } else if (starts_with(name, kOptimV)) {
      vs[name.substr(std::strlen(kOptimV))] = std::move(values);
    } else if (ends_with(name, kRunningMean)) {
      means[name.substr(0, name.size() - std::strlen(kRunningMean))] = std::move(values);
    } else if (ends_with(name, kRunningVar)) {
      vars[name.substr(0, name.size() - std::strlen(kRunningVar))] = std::move(values);
    } else {
      ck.store.add(name, ad::Tensor<float>(shape, std::move(values)));
    }
  }
  for (auto& [name, mean] : means) {
    auto it = vars.find(name);
    if (it == vars.end() || it->second.size() != mean.size()) {
      throw Error(ErrorCode::kCheckpointMismatch, "incomplete batch-norm state '" + name + "'");
    }
    auto& state = ck.store.batch_norms()[name];
    state.running_mean = std::move(mean);
    state.running_var = std::move(it->second);
  }
  for (auto& [name, m] : ms) {
    auto it = vs.find(name);
    if (it == vs.end() || !ck.store.contains(name) || ck.store.get(name).size() != m.size()) {
      throw Error(ErrorCode::kCheckpointMismatch, "incomplete optimiser state '" + name + "'");
    }
    ck.store.adam()[name] = AdamSlot<float>{std::move(m), std::move(it->second)};
  }
  const auto trailer_len = in.get<std::uint64_t>();
  const std::string trailer = in.get_string(static_cast<std::size_t>(trailer_len));
  if (!in.done()) throw Error(ErrorCode::kCheckpointMismatch, "trailing bytes in checkpoint");
  try {
    ck.config = nlohmann::json::parse(trailer);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kCheckpointMismatch, std::string("config trailer: ") + e.what());
  }
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const ParameterStore<float>& store,
                     const nlohmann::json& config) {
  const std::string bytes = serialize_checkpoint(store, config);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIoError, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::kIoError, "short write to " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIoError, "cannot read " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return deserialize_checkpoint(buf.str());
}

}  // namespace toan
