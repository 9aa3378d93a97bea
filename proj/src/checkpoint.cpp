#include "npf/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace npf {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

namespace {

void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void write_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint32_t read_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}

std::uint64_t read_u64(std::istream& is) {
  std::uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}

void write_record(std::ostream& os, const std::string& name, const Tensor& t) {
  write_u32(os, static_cast<std::uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  const std::uint8_t tag = t.dtype() == Dtype::F32 ? 0 : 1;
  os.write(reinterpret_cast<const char*>(&tag), 1);
  write_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (int d = 0; d < t.rank(); ++d) write_u64(os, static_cast<std::uint64_t>(t.extent(d)));
  if (t.dtype() == Dtype::F32) {
    auto span = t.data<float>();
    os.write(reinterpret_cast<const char*>(span.data()),
             static_cast<std::streamsize>(span.size() * sizeof(float)));
  } else {
    auto span = t.data<double>();
    os.write(reinterpret_cast<const char*>(span.data()),
             static_cast<std::streamsize>(span.size() * sizeof(double)));
  }
}

bool read_record(std::istream& is, std::string& name, Tensor& t) {
  std::uint32_t name_len = 0;
  is.read(reinterpret_cast<char*>(&name_len), sizeof name_len);
  if (!is) return false;  // clean EOF
  name.resize(name_len);
  is.read(name.data(), name_len);
  std::uint8_t tag = 0;
  is.read(reinterpret_cast<char*>(&tag), 1);
  const std::uint32_t rank = read_u32(is);
  Shape shape(rank);
  for (std::uint32_t d = 0; d < rank; ++d) shape[d] = static_cast<i64>(read_u64(is));
  if (!is) throw std::runtime_error("checkpoint: truncated record header for '" + name + "'");
  const i64 n = shape_numel(shape);
  if (tag == 0) {
    std::vector<float> vals(static_cast<std::size_t>(n));
    is.read(reinterpret_cast<char*>(vals.data()),
            static_cast<std::streamsize>(vals.size() * sizeof(float)));
    t = Tensor::from_f32(std::move(shape), std::move(vals));
  } else if (tag == 1) {
    std::vector<double> vals(static_cast<std::size_t>(n));
    is.read(reinterpret_cast<char*>(vals.data()),
            static_cast<std::streamsize>(vals.size() * sizeof(double)));
    t = Tensor::from_f64(std::move(shape), std::move(vals));
  } else {
    throw std::runtime_error("checkpoint: unknown dtype tag " + std::to_string(tag) + " for '" +
                             name + "'");
  }
  if (!is) throw std::runtime_error("checkpoint: truncated data for '" + name + "'");
  return true;
}

}  // namespace

void save_checkpoint(const std::string& path, const ParamStore& params, const OptState* opt) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
  os.write(kCheckpointMagic, 8);
  write_u32(os, kCheckpointVersion);
  write_record(os, "meta.rng_seed",
               Tensor::scalar(static_cast<double>(params.rng_seed()), Dtype::F64));
  for (const auto& [name, t] : params.entries()) write_record(os, name, t);
  if (opt) {
    write_record(os, "opt.step", Tensor::scalar(static_cast<double>(opt->step), Dtype::F64));
    write_record(os, "opt.base_lr", Tensor::scalar(opt->base_lr, Dtype::F64));
    write_record(os, "opt.total_steps",
                 Tensor::scalar(static_cast<double>(opt->total_steps), Dtype::F64));
    for (const auto& [name, t] : opt->m) write_record(os, "opt.m." + name, t);
    for (const auto& [name, t] : opt->v) write_record(os, "opt.v." + name, t);
  }
  if (!os) throw std::runtime_error("checkpoint: write failed for '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
  char magic[8] = {};
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw std::runtime_error("checkpoint: bad magic in '" + path + "'");
  const std::uint32_t version = read_u32(is);
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  Checkpoint ck;
  std::string name;
  Tensor t;
  while (read_record(is, name, t)) {
    if (name.rfind("opt.", 0) == 0) {
      ck.has_opt = true;
      const std::string key = name.substr(4);
      if (key == "step")
        ck.opt.step = static_cast<i64>(t.at(0));
      else if (key == "base_lr")
        ck.opt.base_lr = t.at(0);
      else if (key == "total_steps")
        ck.opt.total_steps = static_cast<i64>(t.at(0));
      else if (key.rfind("m.", 0) == 0)
        ck.opt.m[key.substr(2)] = t;
      else if (key.rfind("v.", 0) == 0)
        ck.opt.v[key.substr(2)] = t;
      else
        throw std::runtime_error("checkpoint: unknown optimizer record '" + name + "'");
    } else if (name == "meta.rng_seed") {
      ck.params.set_rng_seed(static_cast<std::uint64_t>(t.at(0)));
    } else {
      ck.params.add(name, t);
    }
  }
  return ck;
}

}  // namespace npf
