// Small IPv4 socket helpers shared by the transport, proxy, and benchmark.
#pragma once

#include <netinet/in.h>

#include <chrono>
#include <cstdint>
#include <string>

namespace ucrdma::net {

// Parses "host:port" or bare "port" (host defaults to 0.0.0.0). Throws
// std::invalid_argument on garbage.
sockaddr_in parse_addr(const std::string& spec);
std::string to_string(const sockaddr_in& a);

int udp_socket();                 // throws std::system_error
int tcp_socket();
void bind_to(int fd, const sockaddr_in& addr);
uint16_t local_port(int fd);
void set_buffers(int fd, int snd, int rcv);
void set_nonblocking(int fd);
void set_recv_timeout(int fd, std::chrono::milliseconds t);

// Line-oriented helpers for the benchmark control connection.
bool send_all(int fd, const void* data, size_t len);
bool recv_line(int fd, std::string& line);  // reads until '\n', false on EOF/error
bool send_line(int fd, const std::string& line);

}  // namespace ucrdma::net
