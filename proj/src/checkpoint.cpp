#include "elsa/checkpoint.hpp"

#include "elsa/error.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <set>

namespace elsa {

using nlohmann::json;

namespace {

constexpr char kMagic[] = "ELSA1\n";
constexpr std::size_t kMagicLen = sizeof(kMagic) - 1;

std::size_t dtype_size(const std::string& dtype) {
  if (dtype == "f64") return 8;
  if (dtype == "u16") return 2;
  if (dtype == "u8") return 1;
  throw ArtifactError("unknown dtype '" + dtype + "'");
}

void put_le(std::vector<std::uint8_t>& out, std::uint64_t v, std::size_t bytes) {
  for (std::size_t i = 0; i < bytes; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_le(const std::uint8_t* p, std::size_t bytes) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

class Writer {
 public:
  void f64(const std::string& name, const std::string& role, const Matrix& m) {
    const std::uint64_t offset = begin(name, "f64", role, m.rows(), m.cols());
    for (Index i = 0; i < m.rows(); ++i)
      for (Index j = 0; j < m.cols(); ++j) put_le(blob_, std::bit_cast<std::uint64_t>(m(i, j)), 8);
    finish(offset);
  }
  void codes(const std::string& name, const CodeMatrix& c) {
    const std::uint64_t offset = begin(name, "u8", "qcodes", c.rows(), c.cols());
    for (Index i = 0; i < c.rows(); ++i)
      for (Index j = 0; j < c.cols(); ++j) put_le(blob_, c(i, j), 1);
    finish(offset);
  }
  void zeros(const std::string& name, const std::vector<std::int64_t>& z) {
    const std::uint64_t offset = begin(name, "u16", "qzero", 1, static_cast<Index>(z.size()));
    for (std::int64_t v : z) put_le(blob_, static_cast<std::uint64_t>(v), 2);
    finish(offset);
  }
  void mask(const std::string& name, const Matrix& m) {
    const std::uint64_t offset = begin(name, "u8", "mask", m.rows(), m.cols());
    for (Index i = 0; i < m.rows(); ++i)
      for (Index j = 0; j < m.cols(); ++j) put_le(blob_, m(i, j) != 0.0 ? 1 : 0, 1);
    finish(offset);
  }

  json records = json::array();
  std::vector<std::uint8_t>& blob() { return blob_; }

 private:
  std::uint64_t begin(const std::string& name, const char* dtype, const std::string& role, Index rows, Index cols) {
    pending_ = {{"name", name}, {"dtype", dtype}, {"shape", {rows, cols}}, {"offset", blob_.size()}, {"role", role}};
    return blob_.size();
  }
  void finish(std::uint64_t offset) {
    pending_["nbytes"] = blob_.size() - offset;
    records.push_back(std::move(pending_));
  }

  json pending_;
  std::vector<std::uint8_t> blob_;
};

json adapter_json(const ElasticAdapter& a) {
  return {{"alpha", a.alpha},
          {"scale", a.scale},
          {"rank_choices", a.rank_choices},
          {"in_choices", a.in_choices},
          {"out_choices", a.out_choices},
          {"mode", to_string(a.mode)}};
}

json supernet_json(const SupernetConfig& s) {
  json layers = json::array(), groups = json::array();
  for (const LayerSpace& l : s.layers) {
    layers.push_back({{"layer_id", l.layer_id}, {"rank_choices", l.rank_choices}, {"width_group", l.width_group}});
  }
  for (const WidthGroup& g : s.groups) groups.push_back({{"tag", g.tag}, {"width_choices", g.width_choices}});
  return {{"layers", layers}, {"groups", groups}};
}

template <class T>
T field(const json& j, const char* key) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ArtifactError(std::string("manifest field '") + key + "': " + e.what());
  }
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const TinyTransformer& model, const json& metadata) {
  Writer w;
  json layers = json::array();
  w.f64("tok_embed", "frozen", model.tok_embed.value());
  w.f64("pos_embed", "frozen", model.pos_embed.value());
  json blocks = json::array();
  for (std::size_t i = 0; i < model.blocks.size(); ++i) {
    const Block& b = model.blocks[i];
    const std::string prefix = "blocks." + std::to_string(i) + ".";
    blocks.push_back({{"heads", b.heads}, {"mlp", b.mlp}});
    w.f64(prefix + "ln1.gamma", "frozen", b.ln1.gamma.value());
    w.f64(prefix + "ln1.beta", "frozen", b.ln1.beta.value());
    w.f64(prefix + "ln2.gamma", "frozen", b.ln2.gamma.value());
    w.f64(prefix + "ln2.beta", "frozen", b.ln2.beta.value());
  }
  for (const AdaptedLinear* l : model.linears()) {
    const std::string& id = l->layer_id;
    json layer = {{"id", id},
                  {"in", l->in_features()},
                  {"out", l->out_features()},
                  {"mask_adapter", l->mask_adapter},
                  {"adapter", nullptr},
                  {"quant", nullptr}};
    if (l->codes) {
      if (!l->qparams) throw ContractError(id + ": merged codes without quantization parameters");
      w.codes(id + ".qcodes", *l->codes);
    } else {
      w.f64(id + ".weight", "frozen", l->weight.value());
    }
    if (l->qparams) {
      const QuantParams& q = *l->qparams;
      w.f64(id + ".qscale", "qscale", Eigen::Map<const Matrix>(q.scales.data(), 1, q.groups()));
      w.zeros(id + ".qzero", q.zeros);
      layer["quant"] = {{"bits", q.bits}, {"degenerate", q.degenerate}, {"merged", l->codes.has_value()}};
    }
    if (l->mask) w.mask(id + ".mask", *l->mask);
    if (l->adapter) {
      w.f64(id + ".adapter.l1", "adapter", l->adapter->l1.value());
      w.f64(id + ".adapter.l2", "adapter", l->adapter->l2.value());
      layer["adapter"] = adapter_json(*l->adapter);
    }
    layers.push_back(std::move(layer));
  }
  w.f64("ln_f.gamma", "frozen", model.ln_f.gamma.value());
  w.f64("ln_f.beta", "frozen", model.ln_f.beta.value());
  w.f64("head", "frozen", model.head.value());

  const ModelDims& d = model.dims;
  json manifest = {
      {"format", "ELSA1"},
      {"model",
       {{"vocab", d.vocab},
        {"width", d.width},
        {"heads", d.heads},
        {"mlp", d.mlp},
        {"depth", d.depth},
        {"max_seq", d.max_seq},
        {"head_dim", model.head_dim},
        {"blocks", blocks}}},
      {"layers", layers},
      {"supernet", supernet_json(model.space)},
      {"metadata", metadata.is_null() ? json::object() : metadata},
      {"tensors", w.records},
  };
  const std::string text = manifest.dump(2) + "\n";
  std::vector<std::uint8_t> out(kMagic, kMagic + kMagicLen);
  put_le(out, text.size(), 8);
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), w.blob().begin(), w.blob().end());
  return out;
}

Checkpoint Checkpoint::parse(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kMagicLen + 8 || std::memcmp(bytes.data(), kMagic, kMagicLen) != 0) {
    throw ArtifactError("not an ELSA1 checkpoint (bad magic)");
  }
  const std::uint64_t len = get_le(bytes.data() + kMagicLen, 8);
  const std::size_t start = kMagicLen + 8;
  if (len > bytes.size() - start) throw ArtifactError("checkpoint truncated: manifest length exceeds file");
  Checkpoint c;
  try {
    c.manifest = json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(start),
                             bytes.begin() + static_cast<std::ptrdiff_t>(start + len));
  } catch (const json::exception& e) {
    throw ArtifactError(std::string("manifest is not valid JSON: ") + e.what());
  }
  c.blob.assign(bytes.begin() + static_cast<std::ptrdiff_t>(start + len), bytes.end());
  if (field<std::string>(c.manifest, "format") != "ELSA1") throw ArtifactError("unsupported checkpoint format");
  std::set<std::string> names;
  for (const json& r : field<json>(c.manifest, "tensors")) {
    TensorRecord rec;
    rec.name = field<std::string>(r, "name");
    rec.dtype = field<std::string>(r, "dtype");
    rec.shape = field<Shape>(r, "shape");
    rec.offset = field<std::uint64_t>(r, "offset");
    rec.nbytes = field<std::uint64_t>(r, "nbytes");
    rec.role = field<std::string>(r, "role");
    static const std::set<std::string> roles = {"frozen", "adapter", "qcodes", "qscale", "qzero", "mask"};
    if (!roles.count(rec.role)) throw ArtifactError(rec.name + ": unknown role '" + rec.role + "'");
    if (!names.insert(rec.name).second) throw ArtifactError("duplicate tensor name '" + rec.name + "'");
    std::uint64_t numel = 1;
    for (Index s : rec.shape) {
      if (s < 0) throw ArtifactError(rec.name + ": negative dimension");
      numel *= static_cast<std::uint64_t>(s);
    }
    if (rec.shape.size() != 2 || numel * dtype_size(rec.dtype) != rec.nbytes) {
      throw ArtifactError(rec.name + ": byte size does not match shape and dtype");
    }
    if (rec.offset > c.blob.size() || rec.nbytes > c.blob.size() - rec.offset) {
      throw ArtifactError(rec.name + ": byte range exceeds blob");
    }
    c.records.push_back(std::move(rec));
  }
  return c;
}

Matrix Checkpoint::tensor(const TensorRecord& rec) const {
  const std::size_t width = dtype_size(rec.dtype);
  Matrix m(rec.shape[0], rec.shape[1]);
  const std::uint8_t* p = blob.data() + rec.offset;
  for (Index i = 0; i < m.size(); ++i, p += width) {
    const std::uint64_t raw = get_le(p, width);
    m.data()[i] = rec.dtype == "f64" ? std::bit_cast<double>(raw) : static_cast<double>(raw);
  }
  return m;
}

const TensorRecord* Checkpoint::lookup(std::string_view name) const {
  for (const TensorRecord& r : records) {
    if (r.name == name) return &r;
  }
  return nullptr;
}

const TensorRecord& Checkpoint::find(std::string_view name) const {
  if (const TensorRecord* r = lookup(name)) return *r;
  throw ArtifactError("checkpoint has no tensor '" + std::string(name) + "'");
}

Artifact deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  const Checkpoint c = Checkpoint::parse(bytes);
  const json& mj = field<json>(c.manifest, "model");
  Artifact a;
  TinyTransformer& m = a.model;
  m.dims.vocab = field<Index>(mj, "vocab");
  m.dims.width = field<Index>(mj, "width");
  m.dims.heads = field<Index>(mj, "heads");
  m.dims.mlp = field<Index>(mj, "mlp");
  m.dims.depth = field<Index>(mj, "depth");
  m.dims.max_seq = field<Index>(mj, "max_seq");
  m.head_dim = field<Index>(mj, "head_dim");
  const auto get = [&c](const std::string& name, Index rows, Index cols) {
    const TensorRecord& r = c.find(name);
    if (r.shape != Shape{rows, cols}) {
      throw ArtifactError(name + ": expected shape " + shape_string({rows, cols}) + ", found " +
                          shape_string(r.shape));
    }
    return c.tensor(r);
  };
  const Index d = m.dims.width;
  m.tok_embed = Tensor(get("tok_embed", m.dims.vocab, d));
  m.pos_embed = Tensor(get("pos_embed", m.dims.max_seq, d));
  const json& blocks = field<json>(mj, "blocks");
  if (static_cast<Index>(blocks.size()) != m.dims.depth) throw ArtifactError("block count does not match depth");
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    Block b;
    b.heads = field<Index>(blocks[i], "heads");
    b.mlp = field<Index>(blocks[i], "mlp");
    const std::string prefix = "blocks." + std::to_string(i) + ".";
    b.ln1 = {Tensor(get(prefix + "ln1.gamma", 1, d)), Tensor(get(prefix + "ln1.beta", 1, d))};
    b.ln2 = {Tensor(get(prefix + "ln2.gamma", 1, d)), Tensor(get(prefix + "ln2.beta", 1, d))};
    m.blocks.push_back(std::move(b));
  }
  if (!c.manifest.contains("layers") || !c.manifest["layers"].is_array()) {
    throw ArtifactError("manifest field 'layers' missing");
  }
  const json& layer_docs = c.manifest["layers"];
  for (std::size_t i = 0; i < m.blocks.size(); ++i) {
    Block& b = m.blocks[i];
    const Index hc = b.heads * m.head_dim;
    const std::pair<AdaptedLinear*, std::pair<Index, Index>> shapes[] = {
        {&b.q, {d, hc}}, {&b.k, {d, hc}}, {&b.v, {d, hc}}, {&b.o, {hc, d}}, {&b.up, {d, b.mlp}}, {&b.down, {b.mlp, d}}};
    static const char* names[] = {"q", "k", "v", "o", "up", "down"};
    for (std::size_t k = 0; k < 6; ++k) shapes[k].first->layer_id = layer_name(static_cast<Index>(i), names[k]);
    for (const auto& [layer, dims] : shapes) {
      const json* lj = nullptr;
      for (const json& l : layer_docs) {
        if (l.at("id") == layer->layer_id) lj = &l;
      }
      if (!lj) throw ArtifactError("manifest has no layer '" + layer->layer_id + "'");
      const auto [rows, cols] = dims;
      const std::string& id = layer->layer_id;
      layer->mask_adapter = field<bool>(*lj, "mask_adapter");
      const json& quant = lj->at("quant");
      if (!quant.is_null()) {
        QuantParams q;
        q.bits = field<int>(quant, "bits");
        q.degenerate = field<std::vector<std::uint8_t>>(quant, "degenerate");
        const Matrix s = get(id + ".qscale", 1, cols);
        const Matrix z = get(id + ".qzero", 1, cols);
        q.scales.assign(s.data(), s.data() + s.size());
        for (Index j = 0; j < cols; ++j) q.zeros.push_back(static_cast<std::int64_t>(z(0, j)));
        if (static_cast<Index>(q.degenerate.size()) != cols) throw ArtifactError(id + ": degenerate flags length");
        if (field<bool>(quant, "merged")) {
          layer->codes = get(id + ".qcodes", rows, cols).cast<std::uint16_t>();
          layer->weight = Tensor(dequantize(*layer->codes, q), false);
        }
        layer->qparams = std::move(q);
      }
      if (!layer->codes) layer->weight = Tensor(get(id + ".weight", rows, cols), false);
      if (c.lookup(id + ".mask")) layer->mask = get(id + ".mask", rows, cols);
      const json& aj = lj->at("adapter");
      if (!aj.is_null()) {
        ElasticAdapter ad;
        const TensorRecord& l1 = c.find(id + ".adapter.l1");
        if (l1.shape.size() != 2 || l1.shape[0] != rows) throw ArtifactError(id + ": adapter shape mismatch");
        const Index r = l1.shape[1];
        ad.l1 = Tensor(get(id + ".adapter.l1", rows, r), true);
        ad.l2 = Tensor(get(id + ".adapter.l2", r, cols), true);
        ad.alpha = field<double>(aj, "alpha");
        ad.scale = field<double>(aj, "scale");
        ad.rank_choices = field<std::vector<Index>>(aj, "rank_choices");
        ad.in_choices = field<std::vector<Index>>(aj, "in_choices");
        ad.out_choices = field<std::vector<Index>>(aj, "out_choices");
        ad.mode = parse_elastic_mode(field<std::string>(aj, "mode"));
        layer->adapter = std::move(ad);
      }
    }
  }
  m.ln_f = {Tensor(get("ln_f.gamma", 1, d)), Tensor(get("ln_f.beta", 1, d))};
  m.head = Tensor(get("head", d, m.dims.vocab));
  try {
    m.space = derive_supernet(m);
  } catch (const Error& e) {
    throw ArtifactError(std::string("inconsistent supernet: ") + e.what());
  }
  if (supernet_json(m.space) != c.manifest.at("supernet")) {
    throw ArtifactError("stored supernet does not match the adapters in the checkpoint");
  }
  a.metadata = c.manifest.at("metadata");
  return a;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArtifactError("cannot open '" + path.string() + "'");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void save_checkpoint(const std::filesystem::path& path, const TinyTransformer& model, const json& metadata) {
  const std::vector<std::uint8_t> bytes = serialize_checkpoint(model, metadata);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ArtifactError("cannot write '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ArtifactError("write failed for '" + path.string() + "'");
}

Artifact load_checkpoint(const std::filesystem::path& path) { return deserialize_checkpoint(read_file(path)); }

ParamCount count_params(const Checkpoint& ckpt) {
  ParamCount c;
  for (const TensorRecord& r : ckpt.records) {
    if (r.role != "frozen" && r.role != "adapter" && r.role != "qcodes") continue;
    const Matrix v = ckpt.tensor(r);
    c.total += static_cast<std::int64_t>(v.size());
    if (r.role == "qcodes") {
      const std::string layer = r.name.substr(0, r.name.size() - std::string(".qcodes").size());
      const Matrix z = ckpt.tensor(ckpt.find(layer + ".qzero"));
      for (Index i = 0; i < v.rows(); ++i)
        for (Index j = 0; j < v.cols(); ++j) c.nonzero += v(i, j) != z(0, j);
    } else {
      c.nonzero += static_cast<std::int64_t>((v.array() != 0.0).count());
    }
  }
  return c;
}

}  // namespace elsa
