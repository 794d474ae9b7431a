#include "framegate/serialize.hpp"

#include "framegate/hashing.hpp"

#include <cstring>
#include <fstream>

namespace framegate::io {

namespace {

constexpr size_t kDigestLen = 64;

void write_u64(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(char(uint8_t(v >> (8 * i))));
}

uint64_t read_u64(const std::string& buf, size_t at) {
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= uint64_t(uint8_t(buf[at + i])) << (8 * i);
    return v;
}

}  // namespace

void save_tensor_file(const TensorFile& tf, const std::string& path, const std::string& magic) {
    if (magic.size() != 8) throw ConfigError("tensor file magic must be 8 bytes");
    nlohmann::json header;
    header["meta"] = tf.meta;
    auto& table = header["tensors"] = nlohmann::json::array();
    for (const auto& [name, m] : tf.tensors)
        table.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
    const std::string header_str = header.dump();

    std::string blob;
    blob += magic;
    write_u64(blob, header_str.size());
    blob += header_str;
    for (const auto& [name, m] : tf.tensors) {
        (void)name;
        const size_t bytes = size_t(m.size()) * sizeof(Scalar);
        const size_t at = blob.size();
        blob.resize(at + bytes);
        if (bytes > 0) std::memcpy(blob.data() + at, m.data(), bytes);
    }
    blob += hashing::sha256_hex(blob);

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IntegrityError("cannot open for writing: " + path);
    out.write(blob.data(), std::streamsize(blob.size()));
    if (!out) throw IntegrityError("short write: " + path);
}

TensorFile load_tensor_file(const std::string& path, const std::string& magic) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IntegrityError("cannot open: " + path);
    std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    if (blob.size() < magic.size() + 8 + kDigestLen)
        throw IntegrityError("tensor file truncated: " + path);
    if (blob.compare(0, magic.size(), magic) != 0)
        throw IntegrityError("bad magic or unsupported version: " + path);

    const std::string stored(blob.end() - std::ptrdiff_t(kDigestLen), blob.end());
    const std::string body(blob.begin(), blob.end() - std::ptrdiff_t(kDigestLen));
    if (hashing::sha256_hex(body) != stored)
        throw IntegrityError("checksum mismatch: " + path);

    const uint64_t header_len = read_u64(blob, magic.size());
    size_t at = magic.size() + 8;
    if (at + header_len > body.size()) throw IntegrityError("tensor file truncated: " + path);
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(blob.substr(at, header_len));
    } catch (const nlohmann::json::exception&) {
        throw IntegrityError("corrupt header: " + path);
    }
    at += header_len;

    TensorFile tf;
    tf.meta = header.at("meta");
    for (const auto& entry : header.at("tensors")) {
        const auto name = entry.at("name").get<std::string>();
        const auto rows = entry.at("rows").get<Eigen::Index>();
        const auto cols = entry.at("cols").get<Eigen::Index>();
        if (rows < 0 || cols < 0) throw IntegrityError("corrupt tensor shape: " + path);
        const size_t bytes = size_t(rows) * size_t(cols) * sizeof(Scalar);
        if (at + bytes > body.size()) throw IntegrityError("tensor file truncated: " + path);
        Matrix m(rows, cols);
        if (bytes > 0) std::memcpy(m.data(), blob.data() + at, bytes);
        at += bytes;
        tf.tensors.emplace_back(name, std::move(m));
    }
    if (at != body.size()) throw IntegrityError("trailing bytes in tensor file: " + path);
    return tf;
}

void save_checkpoint(const lm::Checkpoint& ckpt, const std::string& path) {
    TensorFile tf;
    const auto& cfg = ckpt.config;
    tf.meta["config"] = {{"n_layers", cfg.n_layers},         {"d_model", cfg.d_model},
                         {"n_heads", cfg.n_heads},           {"vocab_size", cfg.vocab_size},
                         {"context_length", cfg.context_length},
                         {"capture_layer", cfg.capture_layer}, {"seed", cfg.seed}};
    auto& prov = tf.meta["provenance"] = nlohmann::json::array();
    for (const auto& p : ckpt.provenance)
        prov.push_back({{"corpus_id", p.corpus_id}, {"hyperparams", p.hyperparams}});

    lm::Weights& w = const_cast<lm::Weights&>(ckpt.weights);
    for (const auto& ref : lm::param_refs(w)) {
        Matrix m(1, ref.size);
        std::memcpy(m.data(), ref.data, size_t(ref.size) * sizeof(Scalar));
        tf.tensors.emplace_back(ref.name, std::move(m));
    }
    save_tensor_file(tf, path, kCheckpointMagic);
}

lm::Checkpoint load_checkpoint(const std::string& path) {
    const TensorFile tf = load_tensor_file(path, kCheckpointMagic);
    lm::ModelConfig cfg;
    const auto& jc = tf.meta.at("config");
    cfg.n_layers = jc.at("n_layers").get<int>();
    cfg.d_model = jc.at("d_model").get<int>();
    cfg.n_heads = jc.at("n_heads").get<int>();
    cfg.vocab_size = jc.at("vocab_size").get<int>();
    cfg.context_length = jc.at("context_length").get<int>();
    cfg.capture_layer = jc.at("capture_layer").get<int>();
    cfg.seed = jc.at("seed").get<uint64_t>();

    lm::Checkpoint ckpt = lm::init_checkpoint(cfg);
    ckpt.provenance.clear();
    for (const auto& p : tf.meta.at("provenance"))
        ckpt.provenance.push_back(
            {p.at("corpus_id").get<std::string>(), p.at("hyperparams").get<std::string>()});

    auto refs = lm::param_refs(ckpt.weights);
    if (refs.size() != tf.tensors.size())
        throw IntegrityError("checkpoint tensor count mismatch: " + path);
    for (size_t i = 0; i < refs.size(); ++i) {
        const auto& [name, m] = tf.tensors[i];
        if (name != refs[i].name || m.size() != refs[i].size)
            throw IntegrityError("checkpoint tensor layout mismatch at " + name + ": " + path);
        std::memcpy(refs[i].data, m.data(), size_t(m.size()) * sizeof(Scalar));
    }
    return ckpt;
}

}  // namespace framegate::io
