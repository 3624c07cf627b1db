#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "ssk/nn/tape.hpp"

namespace ssk::nn {

namespace {

constexpr std::uint64_t kMagic = 0x31544b50434b5353ull;  // "SSKCPKT1"

void put_u64(std::vector<unsigned char>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(const std::vector<unsigned char>& b) : b_(b) {}
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(b_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(b_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint8_t u8() {
    need(1);
    return b_[pos_++];
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > b_.size()) throw std::runtime_error("checkpoint truncated");
  }
  const std::vector<unsigned char>& b_;
  std::size_t pos_ = 0;
};

}  // namespace

std::uint64_t fnv1a(const std::string& s, std::uint64_t basis) {
  std::uint64_t h = basis;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

Parameter& ParamStore::get(const std::string& name, int rows, int cols, const Init& init, bool trainable) {
  auto it = params_.find(name);
  if (it != params_.end()) {
    Parameter& p = *it->second;
    if (p.value.rows() != rows || p.value.cols() != cols)
      throw std::invalid_argument("parameter '" + name + "' shape mismatch");
    return p;
  }
  auto p = std::make_unique<Parameter>();
  p->name = name;
  p->trainable = trainable;
  p->value = Mat::Zero(rows, cols);
  if (init) init(p->value, fnv1a(name, 1469598103934665603ull ^ (seed_ * 0x9e3779b97f4a7c15ull)));
  auto& ref = *p;
  params_.emplace(name, std::move(p));
  return ref;
}

Parameter& ParamStore::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("no parameter '" + name + "'");
  return *it->second;
}

const Parameter& ParamStore::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("no parameter '" + name + "'");
  return *it->second;
}

std::vector<Parameter*> ParamStore::all() {
  std::vector<Parameter*> out;
  for (auto& [_, p] : params_) out.push_back(p.get());
  return out;
}

std::vector<const Parameter*> ParamStore::all() const {
  std::vector<const Parameter*> out;
  for (const auto& [_, p] : params_) out.push_back(p.get());
  return out;
}

std::vector<unsigned char> ParamStore::serialize() const {
  std::vector<unsigned char> out;
  put_u64(out, kMagic);
  put_u64(out, static_cast<std::uint64_t>(step_));
  put_u64(out, params_.size());
  for (const auto& [name, p] : params_) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    out.push_back(p->trainable ? 1 : 0);
    put_u64(out, static_cast<std::uint64_t>(p->value.rows()));
    put_u64(out, static_cast<std::uint64_t>(p->value.cols()));
    for (Eigen::Index i = 0; i < p->value.size(); ++i) put_u64(out, std::bit_cast<std::uint64_t>(p->value.data()[i]));
  }
  return out;
}

void ParamStore::deserialize(const std::vector<unsigned char>& bytes) {
  Reader r(bytes);
  if (r.u64() != kMagic) throw std::runtime_error("not a checkpoint file");
  const auto step = static_cast<std::int64_t>(r.u64());
  const auto count = r.u64();
  std::map<std::string, std::unique_ptr<Parameter>> loaded;
  for (std::uint64_t k = 0; k < count; ++k) {
    auto p = std::make_unique<Parameter>();
    p->name = r.str(r.u32());
    p->trainable = r.u8() != 0;
    const auto rows = static_cast<Eigen::Index>(r.u64());
    const auto cols = static_cast<Eigen::Index>(r.u64());
    p->value.resize(rows, cols);
    for (Eigen::Index i = 0; i < rows * cols; ++i) p->value.data()[i] = std::bit_cast<double>(r.u64());
    if (!loaded.emplace(p->name, std::move(p)).second) throw std::runtime_error("duplicate parameter name");
  }
  if (!r.done()) throw std::runtime_error("trailing bytes in checkpoint");
  // Layers hold Parameter pointers, so values are copied into existing entries.
  for (const auto& [name, p] : params_)
    if (!loaded.count(name)) throw std::runtime_error("checkpoint lacks parameter " + name);
  for (auto& [name, p] : loaded) {
    const auto it = params_.find(name);
    if (it == params_.end()) {
      params_.emplace(name, std::move(p));
      continue;
    }
    Parameter& dst = *it->second;
    if (dst.value.rows() != p->value.rows() || dst.value.cols() != p->value.cols())
      throw std::runtime_error("checkpoint shape mismatch for " + name);
    dst.value = p->value;
    dst.trainable = p->trainable;
    dst.adam_m = Mat();
    dst.adam_v = Mat();
  }
  step_ = step;
}

void ParamStore::save(const std::filesystem::path& path) const {
  const auto bytes = serialize();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void ParamStore::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  deserialize(bytes);
}

}  // namespace ssk::nn
