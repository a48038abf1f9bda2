//! Minimal blocking HTTP/1.1 client for JSON POSTs to judge and policy
//! endpoints. Plain `http://` only.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

#[derive(Debug, thiserror::Error)]
pub enum HttpError {
    #[error("unsupported url {0:?} (expected http://host[:port]/path)")]
    BadUrl(String),
    #[error("connection failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("http status {status}: {body}")]
    Status { status: u16, body: String },
}

impl HttpError {
    /// Failures worth retrying: transport errors, 429 and 5xx.
    pub fn is_transient(&self) -> bool {
        match self {
            HttpError::Io(_) | HttpError::Malformed(_) => true,
            HttpError::Status { status, .. } => *status == 429 || *status >= 500,
            HttpError::BadUrl(_) => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Url {
    pub host: String,
    pub port: u16,
    pub path: String,
}

impl Url {
    pub fn parse(url: &str) -> Result<Self, HttpError> {
        let bad = || HttpError::BadUrl(url.to_string());
        let rest = url.strip_prefix("http://").ok_or_else(bad)?;
        let (authority, path) = match rest.find('/') {
            Some(i) => (&rest[..i], &rest[i..]),
            None => (rest, "/"),
        };
        let (host, port) = match authority.rsplit_once(':') {
            Some((h, p)) => (h, p.parse::<u16>().map_err(|_| bad())?),
            None => (authority, 80),
        };
        if host.is_empty() {
            return Err(bad());
        }
        Ok(Self {
            host: host.to_string(),
            port,
            path: path.to_string(),
        })
    }
}

/// POST a JSON body and return the parsed JSON response of a 2xx reply.
pub fn post_json(
    url: &str,
    body: &serde_json::Value,
    headers: &[(String, String)],
    timeout: Duration,
) -> Result<serde_json::Value, HttpError> {
    let u = Url::parse(url)?;
    let addr = (u.host.as_str(), u.port)
        .to_socket_addrs()?
        .next()
        .ok_or_else(|| HttpError::BadUrl(url.to_string()))?;
    let mut stream = TcpStream::connect_timeout(&addr, timeout)?;
    stream.set_read_timeout(Some(timeout))?;
    stream.set_write_timeout(Some(timeout))?;
    let payload = serde_json::to_vec(body).map_err(|e| HttpError::Malformed(e.to_string()))?;
    let mut req = format!(
        "POST {} HTTP/1.1\r\nHost: {}:{}\r\nContent-Type: application/json\r\nAccept: application/json\r\nContent-Length: {}\r\nConnection: close\r\n",
        u.path,
        u.host,
        u.port,
        payload.len()
    );
    for (k, v) in headers {
        req.push_str(&format!("{k}: {v}\r\n"));
    }
    req.push_str("\r\n");
    stream.write_all(req.as_bytes())?;
    stream.write_all(&payload)?;
    stream.flush()?;

    let mut reader = BufReader::new(stream);
    let mut status_line = String::new();
    reader.read_line(&mut status_line)?;
    let status: u16 = status_line
        .split_whitespace()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| HttpError::Malformed(format!("status line {status_line:?}")))?;
    let mut content_length = None;
    let mut chunked = false;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 {
            break;
        }
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            let k = k.trim().to_ascii_lowercase();
            let v = v.trim();
            if k == "content-length" {
                content_length = v.parse::<usize>().ok();
            } else if k == "transfer-encoding" && v.to_ascii_lowercase().contains("chunked") {
                chunked = true;
            }
        }
    }
    let body_bytes = if chunked {
        read_chunked(&mut reader)?
    } else if let Some(n) = content_length {
        let mut b = vec![0; n];
        reader.read_exact(&mut b)?;
        b
    } else {
        let mut b = Vec::new();
        reader.read_to_end(&mut b)?;
        b
    };
    let text = String::from_utf8_lossy(&body_bytes).into_owned();
    if !(200..300).contains(&status) {
        return Err(HttpError::Status { status, body: text });
    }
    serde_json::from_str(&text).map_err(|e| HttpError::Malformed(format!("{e}: {text}")))
}

/// `data:` URL with base64 content for an image file, mime type by extension.
pub fn image_data_url(path: &std::path::Path) -> std::io::Result<String> {
    use base64::Engine;
    let bytes = std::fs::read(path)?;
    let mime = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase) {
        Some(e) if e == "png" => "image/png",
        Some(e) if e == "gif" => "image/gif",
        Some(e) if e == "webp" => "image/webp",
        _ => "image/jpeg",
    };
    let data = base64::engine::general_purpose::STANDARD.encode(bytes);
    Ok(format!("data:{mime};base64,{data}"))
}

fn read_chunked<R: BufRead>(reader: &mut R) -> Result<Vec<u8>, HttpError> {
    let mut out = Vec::new();
    loop {
        let mut size_line = String::new();
        reader.read_line(&mut size_line)?;
        let size_hex = size_line.trim().split(';').next().unwrap_or("");
        let size = usize::from_str_radix(size_hex, 16)
            .map_err(|_| HttpError::Malformed(format!("chunk size {size_line:?}")))?;
        if size == 0 {
            break;
        }
        let start = out.len();
        out.resize(start + size, 0);
        reader.read_exact(&mut out[start..])?;
        let mut crlf = String::new();
        reader.read_line(&mut crlf)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::net::TcpListener;
    use std::thread;

    fn serve_once(response: &'static str) -> String {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        thread::spawn(move || {
            let (mut s, _) = listener.accept().unwrap();
            let mut r = BufReader::new(s.try_clone().unwrap());
            let mut len = 0;
            loop {
                let mut l = String::new();
                r.read_line(&mut l).unwrap();
                if l.to_ascii_lowercase().starts_with("content-length:") {
                    len = l[15..].trim().parse().unwrap();
                }
                if l == "\r\n" {
                    break;
                }
            }
            let mut b = vec![0; len];
            r.read_exact(&mut b).unwrap();
            s.write_all(response.as_bytes()).unwrap();
        });
        format!("http://{addr}/v1/chat")
    }

    #[test]
    fn parses_urls() {
        let u = Url::parse("http://localhost:8000/v1/chat/completions").unwrap();
        assert_eq!((u.host.as_str(), u.port, u.path.as_str()), ("localhost", 8000, "/v1/chat/completions"));
        assert_eq!(Url::parse("http://h").unwrap().path, "/");
        assert!(Url::parse("https://h/x").is_err());
    }

    #[test]
    fn content_length_response() {
        let url = serve_once("HTTP/1.1 200 OK\r\nContent-Length: 8\r\n\r\n{\"a\": 1}");
        let v = post_json(&url, &serde_json::json!({}), &[], Duration::from_secs(5)).unwrap();
        assert_eq!(v["a"], 1);
    }

    #[test]
    fn chunked_response() {
        let url = serve_once("HTTP/1.1 200 OK\r\nTransfer-Encoding: chunked\r\n\r\n4\r\n{\"a\"\r\n4\r\n: 2}\r\n0\r\n\r\n");
        let v = post_json(&url, &serde_json::json!({}), &[], Duration::from_secs(5)).unwrap();
        assert_eq!(v["a"], 2);
    }

    #[test]
    fn error_status_is_reported() {
        let url = serve_once("HTTP/1.1 503 Busy\r\nContent-Length: 2\r\n\r\nno");
        let e = post_json(&url, &serde_json::json!({}), &[], Duration::from_secs(5)).unwrap_err();
        assert!(matches!(e, HttpError::Status { status: 503, .. }));
        assert!(e.is_transient());
    }
}
