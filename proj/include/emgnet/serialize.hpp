#ifndef EMGNET_SERIALIZE_HPP
#define EMGNET_SERIALIZE_HPP

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "emgnet/errors.hpp"

namespace emgnet {

// Little-endian binary stream helpers shared by the model file formats.

class BinaryWriter {
public:
    explicit BinaryWriter(const std::string& path) : out_(path, std::ios::binary) {
        if (!out_) throw DataError("cannot open '" + path + "' for writing");
        path_ = path;
    }

    void write_bytes(const void* data, std::size_t n) {
        out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    }

    void write_u32(std::uint32_t v) { write_uint(v, 4); }
    void write_u64(std::uint64_t v) { write_uint(v, 8); }

    void write_f64(double v) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        write_u64(bits);
    }

    void write_f64_array(const std::vector<double>& values) {
        for (double v : values) write_f64(v);
    }

    void write_string(const std::string& s) {
        write_u64(s.size());
        write_bytes(s.data(), s.size());
    }

    void finish() {
        out_.flush();
        if (!out_) throw DataError("write to '" + path_ + "' failed");
    }

private:
    void write_uint(std::uint64_t v, int bytes) {
        unsigned char buf[8];
        for (int i = 0; i < bytes; ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
        write_bytes(buf, static_cast<std::size_t>(bytes));
    }

    std::ofstream out_;
    std::string path_;
};

class BinaryReader {
public:
    explicit BinaryReader(const std::string& path) : in_(path, std::ios::binary) {
        if (!in_) throw DataError("cannot open '" + path + "' for reading");
        path_ = path;
    }

    void read_bytes(void* data, std::size_t n) {
        in_.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
        if (in_.gcount() != static_cast<std::streamsize>(n)) {
            throw DataError("unexpected end of file in '" + path_ + "'");
        }
    }

    std::uint32_t read_u32() { return static_cast<std::uint32_t>(read_uint(4)); }
    std::uint64_t read_u64() { return read_uint(8); }

    double read_f64() {
        const std::uint64_t bits = read_u64();
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }

    void read_f64_array(std::vector<double>& values) {
        for (double& v : values) v = read_f64();
    }

    std::string read_string() {
        const std::uint64_t n = read_u64();
        std::string s(n, '\0');
        if (n > 0) read_bytes(s.data(), n);
        return s;
    }

private:
    std::uint64_t read_uint(int bytes) {
        unsigned char buf[8];
        read_bytes(buf, static_cast<std::size_t>(bytes));
        std::uint64_t v = 0;
        for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
        return v;
    }

    std::ifstream in_;
    std::string path_;
};

} // namespace emgnet

#endif
