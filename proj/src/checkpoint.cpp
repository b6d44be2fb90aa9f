#include "irstd/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace irstd {

namespace {
constexpr char kMagic[8] = {'I', 'R', 'S', 'T', 'D', 'C', 'K', '1'};

void write_u64(std::ostream& os, uint64_t v) { os.write(reinterpret_cast<const char*>(&v), sizeof v); }
uint64_t read_u64(std::istream& is) {
  uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return v;
}
void write_str(std::ostream& os, const std::string& s) {
  write_u64(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
std::string read_str(std::istream& is) {
  const uint64_t n = read_u64(is);
  if (n > (1ull << 32)) throw std::runtime_error("checkpoint: corrupt string length");
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return s;
}
}  // namespace

void Checkpoint::put(const std::string& name, const Tensor& t) { tensors_[name] = t.detach(); }
void Checkpoint::put_text(const std::string& name, std::string text) { texts_[name] = std::move(text); }

const Tensor& Checkpoint::get(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw std::out_of_range("checkpoint has no entry '" + name + "'");
  return it->second;
}

const std::string& Checkpoint::text(const std::string& name) const {
  auto it = texts_.find(name);
  if (it == texts_.end()) throw std::out_of_range("checkpoint has no text entry '" + name + "'");
  return it->second;
}

void Checkpoint::save(const std::string& path) const {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write checkpoint " + path);
    os.write(kMagic, sizeof kMagic);
    write_u64(os, tensors_.size());
    for (const auto& [name, t] : tensors_) {
      write_str(os, name);
      write_u64(os, static_cast<uint64_t>(t.rank()));
      for (int64_t d : t.shape()) write_u64(os, static_cast<uint64_t>(d));
      os.write(reinterpret_cast<const char*>(t.ptr()), static_cast<std::streamsize>(t.numel() * sizeof(double)));
    }
    write_u64(os, texts_.size());
    for (const auto& [name, s] : texts_) {
      write_str(os, name);
      write_str(os, s);
    }
    if (!os) throw std::runtime_error("failed writing checkpoint " + path);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw std::runtime_error("cannot move checkpoint into " + path);
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path);
  char magic[8];
  is.read(magic, sizeof magic);
  if (!is || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
    throw std::runtime_error(path + " is not a checkpoint archive");
  Checkpoint ck;
  const uint64_t n = read_u64(is);
  for (uint64_t i = 0; i < n; ++i) {
    std::string name = read_str(is);
    const uint64_t rank = read_u64(is);
    if (rank > 8) throw std::runtime_error("checkpoint: corrupt rank for " + name);
    Shape shape;
    for (uint64_t r = 0; r < rank; ++r) shape.push_back(static_cast<int64_t>(read_u64(is)));
    Tensor t(shape);
    is.read(reinterpret_cast<char*>(t.ptr()), static_cast<std::streamsize>(t.numel() * sizeof(double)));
    if (!is) throw std::runtime_error("checkpoint: truncated data for " + name);
    ck.tensors_[name] = t;
  }
  const uint64_t nt = read_u64(is);
  for (uint64_t i = 0; i < nt; ++i) {
    std::string name = read_str(is);
    ck.texts_[name] = read_str(is);
  }
  return ck;
}

void store_parameters(Checkpoint& ck, const nn::Module& m, const std::string& prefix) {
  for (const auto& [name, t] : m.named_parameters()) ck.put(prefix + name, t);
}

int load_parameters(const Checkpoint& ck, nn::Module& m, const std::vector<std::string>& prefixes) {
  int loaded = 0;
  for (auto& [name, t] : m.named_parameters()) {
    bool wanted = prefixes.empty();
    for (const auto& p : prefixes) wanted = wanted || name.rfind(p, 0) == 0;
    if (!wanted) continue;
    const Tensor& src = ck.get(name);
    if (src.shape() != t.shape())
      throw ShapeError("checkpoint entry " + name + " has shape " + shape_str(src.shape()) +
                       ", parameter expects " + shape_str(t.shape()));
    Tensor dst = t;
    std::copy(src.data().begin(), src.data().end(), dst.data().begin());
    ++loaded;
  }
  return loaded;
}

}  // namespace irstd
