//! Host literal detection. Any address or host name in a command must be the
//! loopback, the attacking host, or one of the scoped targets.

use std::fmt;
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr};

use serde::{Deserialize, Serialize};

use super::ExtractedCommand;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScopeViolation {
    pub token: String,
}

impl fmt::Display for ScopeViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} is not in scope", self.token)
    }
}

/// Extensions that make a dotted word a file name rather than a host.
const FILE_EXTENSIONS: &[&str] = &[
    "txt", "lst", "list", "xml", "json", "html", "htm", "php", "asp", "aspx", "jsp", "py", "rb", "pl",
    "sh", "c", "cpp", "h", "conf", "cfg", "ini", "log", "gz", "tgz", "tar", "zip", "nse", "out",
    "gnmap", "nmap", "csv", "md", "exe", "dll", "bin", "key", "pem", "pub", "so", "jar", "war", "rc",
    "db", "sql", "bak", "js", "css", "png", "jpg", "gif", "yaml", "yml", "toml", "pcap", "hash",
    "john", "pot", "elf", "ps1", "bat", "cgi", "msf",
];

#[derive(Debug, Clone, PartialEq, Eq)]
enum Host {
    Ip(IpAddr),
    Name(String),
    /// Ranges, CIDR blocks wider than one host, wildcards.
    Multi(String),
}

/// The scope check. `Ok` when every host literal is allowed.
pub fn scope_guard(cmd: &ExtractedCommand, scoped_targets: &[String], local_ip: Option<&str>) -> Result<(), ScopeViolation> {
    let mut allowed_ips: Vec<IpAddr> = Vec::new();
    let mut allowed_names: Vec<String> = vec!["localhost".into()];
    for t in scoped_targets.iter().map(String::as_str).chain(local_ip) {
        match t.trim().parse::<IpAddr>() {
            Ok(ip) => allowed_ips.push(ip),
            Err(_) => allowed_names.push(t.trim().trim_end_matches('.').to_ascii_lowercase()),
        }
    }
    let ok = |h: &Host| match h {
        Host::Ip(ip) => ip.is_loopback() || allowed_ips.contains(ip),
        Host::Name(n) => allowed_names.iter().any(|a| a == n),
        Host::Multi(_) => false,
    };
    for text in cmd.texts() {
        for (token, host) in host_literals(text) {
            if !ok(&host) {
                return Err(ScopeViolation { token });
            }
        }
    }
    Ok(())
}

fn is_sep(c: char) -> bool {
    c.is_whitespace() || matches!(c, ',' | ';' | '\'' | '"' | '(' | ')' | '=' | '|' | '&' | '<' | '>' | '`' | '{' | '}')
}

/// Every host-like literal in `text`, with the token it came from.
fn host_literals(text: &str) -> Vec<(String, Host)> {
    let mut out = Vec::new();
    for token in text.split(is_sep).filter(|t| !t.is_empty()) {
        if let Some(h) = classify(token) {
            out.push((token.to_string(), h));
        }
    }
    out
}

fn classify(token: &str) -> Option<Host> {
    // scheme://[user@]host[:port][/path]
    if let Some(pos) = token.find("://") {
        let scheme = &token[..pos];
        if !scheme.is_empty() && scheme.chars().all(|c| c.is_ascii_alphanumeric() || "+.-".contains(c)) {
            return authority_host(&token[pos + 3..], true);
        }
    }
    // //host/share and \\host\share
    if let Some(rest) = token.strip_prefix("//").or_else(|| token.strip_prefix("\\\\")) {
        return authority_host(rest, true);
    }
    // user@host or user@host:path
    if let Some((user, rest)) = token.rsplit_once('@') {
        if !user.is_empty() && !rest.is_empty() {
            return authority_host(rest, true);
        }
    }
    if let Some(h) = address(token) {
        return Some(h);
    }
    // host:port, host/path
    authority_host(token, false)
}

/// Host part of `authority[/path]`. `explicit` hosts are checked even when
/// they are single-label names.
fn authority_host(s: &str, explicit: bool) -> Option<Host> {
    if let Some(rest) = s.strip_prefix('[') {
        let end = rest.find(']')?;
        return rest[..end]
            .split('%')
            .next()
            .and_then(|a| a.parse::<Ipv6Addr>().ok())
            .map(|ip| Host::Ip(IpAddr::V6(ip)));
    }
    let end = s.find(['/', '\\', '?', '#']).unwrap_or(s.len());
    let path = &s[end..];
    // Drop userinfo: user:password@host.
    let authority = s[..end].rsplit_once('@').map_or(&s[..end], |(_, h)| h);
    if authority.starts_with('[') {
        return authority_host(authority, explicit);
    }
    // CIDR: the address followed by "/prefix".
    if let (Some(ip), Some(prefix)) = (authority.parse::<Ipv4Addr>().ok(), path.strip_prefix('/')) {
        if let Ok(bits) = prefix.parse::<u8>() {
            return Some(if bits == 32 { Host::Ip(IpAddr::V4(ip)) } else { Host::Multi(format!("{authority}{path}")) });
        }
    }
    if let Some(h) = address(authority) {
        return Some(h);
    }
    let host = match authority.rsplit_once(':') {
        Some((h, port)) if port.chars().all(|c| c.is_ascii_digit()) => h,
        _ => authority,
    };
    if host.is_empty() {
        return None;
    }
    if let Some(h) = address(host) {
        return Some(h);
    }
    domain(host, explicit)
}

/// IPv4/IPv6 literals, including ranges and wildcards.
fn address(s: &str) -> Option<Host> {
    if let Ok(ip) = s.parse::<IpAddr>() {
        return Some(Host::Ip(ip));
    }
    if s.matches(':').count() >= 2 {
        if let Some(ip) = s.split('%').next().and_then(|a| a.parse::<Ipv6Addr>().ok()) {
            return Some(Host::Ip(IpAddr::V6(ip)));
        }
    }
    // Octet ranges (10.0.0.1-20) and wildcards (10.0.0.*).
    let parts: Vec<&str> = s.split('.').collect();
    if parts.len() == 4 && parts[0].chars().all(|c| c.is_ascii_digit()) && !parts[0].is_empty() {
        let multi = parts.iter().all(|p| {
            !p.is_empty() && (p.chars().all(|c| c.is_ascii_digit() || c == '-' || c == ',') || *p == "*")
        }) && parts.iter().any(|p| p.contains(['-', ',', '*']));
        if multi {
            return Some(Host::Multi(s.to_string()));
        }
    }
    None
}

fn domain(host: &str, explicit: bool) -> Option<Host> {
    let host = host.trim_end_matches('.').to_ascii_lowercase();
    let labels: Vec<&str> = host.split('.').collect();
    let wildcard = labels.len() > 1 && labels.iter().any(|l| l.contains('*'));
    let label_ok = |l: &&str| {
        !l.is_empty()
            && l.len() <= 63
            && l.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
            && !l.starts_with('-')
    };
    if wildcard {
        let tld = labels[labels.len() - 1];
        let named = tld.len() >= 2 && tld.chars().all(|c| c.is_ascii_alphabetic());
        let glob = !explicit && FILE_EXTENSIONS.contains(&tld);
        return (named && !glob && labels.iter().all(|l| *l == "*" || label_ok(l))).then_some(Host::Multi(host));
    }
    if !labels.iter().all(label_ok) {
        return None;
    }
    if labels.len() == 1 {
        let numeric = host.chars().all(|c| c.is_ascii_digit());
        return (explicit && !numeric).then_some(Host::Name(host));
    }
    let tld = labels[labels.len() - 1];
    if tld.len() < 2 || !tld.chars().all(|c| c.is_ascii_alphabetic()) {
        return None;
    }
    if !explicit && FILE_EXTENSIONS.contains(&tld) {
        return None;
    }
    Some(Host::Name(host))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn targets() -> Vec<String> {
        vec!["10.10.10.3".into(), "lame.htb".into()]
    }

    fn check(args: &[&str]) -> Result<(), ScopeViolation> {
        scope_guard(&ExtractedCommand::argv("t", args), &targets(), Some("10.10.14.2"))
    }

    #[test]
    fn scoped_target_ok() {
        assert!(check(&["-sV", "-p-", "10.10.10.3"]).is_ok());
        assert!(check(&["http://10.10.10.3:8180/manager/html"]).is_ok());
        assert!(check(&["-L", "//10.10.10.3/", "-N"]).is_ok());
        assert!(check(&["root@10.10.10.3"]).is_ok());
        assert!(check(&["http://lame.htb/"]).is_ok());
        assert!(check(&["-e", "LHOST=10.10.14.2"]).is_ok());
        assert!(check(&["127.0.0.1", "[::1]:8080", "localhost:80"]).is_ok());
    }

    #[test]
    fn outside_address_blocked() {
        assert_eq!(check(&["8.8.8.8"]).unwrap_err().token, "8.8.8.8");
        assert!(check(&["10.10.10.0/24"]).is_err());
        assert!(check(&["10.10.10.3/24"]).is_err());
        assert!(check(&["10.10.10.1-254"]).is_err());
        assert!(check(&["http://evil.example.com/x"]).is_err());
        assert!(check(&["2001:db8::1"]).is_err());
        assert!(check(&["//fileserver/share"]).is_err());
    }

    #[test]
    fn userinfo_and_wildcards() {
        assert!(check(&["http://admin:pw@10.10.10.7/"]).is_err());
        assert!(check(&["http://10.10.10.3@10.10.10.23/"]).is_err());
        assert!(check(&["ftp://anonymous@10.10.10.3/"]).is_ok());
        assert!(check(&["http://u@[2001:db8::2]:80/"]).is_err());
        assert!(check(&["*.example.com"]).is_err());
        assert!(check(&["-name", "*.conf"]).is_ok());
    }

    #[test]
    fn files_and_versions_are_not_hosts() {
        assert!(check(&["-w", "/usr/share/wordlists/rockyou.txt"]).is_ok());
        assert!(check(&["-oN", "scan.nmap", "--script", "smb-vuln-ms08-067.nse"]).is_ok());
        assert!(check(&["search", "samba", "3.0.20"]).is_ok());
        assert!(check(&["exploit/unix/ftp/vsftpd_234_backdoor"]).is_ok());
        assert!(check(&["10.10.10.3/32"]).is_ok());
    }

    #[test]
    fn no_literals_is_vacuous() {
        let c = ExtractedCommand::script("metasploit", &[("use exploit/multi/samba/usermap_script", None), ("run", None)]);
        assert!(scope_guard(&c, &targets(), None).is_ok());
    }

    #[test]
    fn script_lines_checked() {
        let c = ExtractedCommand::script("metasploit", &[("set RHOSTS 10.10.10.9", None)]);
        assert_eq!(scope_guard(&c, &targets(), None).unwrap_err().token, "10.10.10.9");
    }
}
