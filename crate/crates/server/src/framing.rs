//! Message framing on stdio pipes.
//!
//! Output is always newline-delimited JSON. Input may also use
//! `Content-Length:` headers, as in LSP-style transports.

use std::io;

use tokio::io::{AsyncBufRead, AsyncBufReadExt, AsyncReadExt, AsyncWrite, AsyncWriteExt};

/// Frames larger than this are rejected rather than buffered.
pub const MAX_FRAME: usize = 16 * 1024 * 1024;

pub struct FrameReader<R> {
    inner: R,
    line: Vec<u8>,
}

impl<R: AsyncBufRead + Unpin> FrameReader<R> {
    pub fn new(inner: R) -> Self {
        FrameReader { inner, line: Vec::new() }
    }

    async fn read_line(&mut self) -> io::Result<usize> {
        self.line.clear();
        let n = (&mut self.inner).take(MAX_FRAME as u64 + 1).read_until(b'\n', &mut self.line).await?;
        if self.line.len() > MAX_FRAME {
            // Discard the rest of the line so the next frame starts clean.
            if !self.line.ends_with(b"\n") {
                loop {
                    let buf = self.inner.fill_buf().await?;
                    if buf.is_empty() {
                        break;
                    }
                    match buf.iter().position(|b| *b == b'\n') {
                        Some(i) => {
                            self.inner.consume(i + 1);
                            break;
                        }
                        None => {
                            let n = buf.len();
                            self.inner.consume(n);
                        }
                    }
                }
            }
            return Err(io::Error::new(io::ErrorKind::InvalidData, "frame exceeds size limit"));
        }
        Ok(n)
    }

    /// The next frame with its line terminator removed, or `None` at EOF.
    pub async fn next_frame(&mut self) -> io::Result<Option<Vec<u8>>> {
        loop {
            if self.read_line().await? == 0 {
                return Ok(None);
            }
            let text = trim_eol(&self.line);
            if text.iter().all(u8::is_ascii_whitespace) {
                continue;
            }
            if let Some(len) = content_length(text) {
                // Skip any further headers up to the blank separator line.
                loop {
                    if self.read_line().await? == 0 {
                        return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "eof inside frame headers"));
                    }
                    if trim_eol(&self.line).is_empty() {
                        break;
                    }
                }
                let mut body = vec![0; len?];
                self.inner.read_exact(&mut body).await?;
                return Ok(Some(body));
            }
            return Ok(Some(text.to_vec()));
        }
    }
}

fn trim_eol(line: &[u8]) -> &[u8] {
    let line = line.strip_suffix(b"\n").unwrap_or(line);
    line.strip_suffix(b"\r").unwrap_or(line)
}

fn content_length(line: &[u8]) -> Option<io::Result<usize>> {
    const KEY: &[u8] = b"content-length:";
    if line.len() < KEY.len() || !line[..KEY.len()].eq_ignore_ascii_case(KEY) {
        return None;
    }
    let value = std::str::from_utf8(&line[KEY.len()..]).unwrap_or("").trim();
    Some(match value.parse::<usize>() {
        Ok(n) if n <= MAX_FRAME => Ok(n),
        _ => Err(io::Error::new(io::ErrorKind::InvalidData, format!("bad Content-Length {value:?}"))),
    })
}

pub async fn write_frame<W: AsyncWrite + Unpin>(w: &mut W, frame: &[u8]) -> io::Result<()> {
    w.write_all(frame).await?;
    w.write_all(b"\n").await?;
    w.flush().await
}

#[cfg(test)]
mod tests {
    use super::*;

    async fn frames(input: &[u8]) -> Vec<Vec<u8>> {
        let mut r = FrameReader::new(input);
        let mut out = Vec::new();
        while let Some(f) = r.next_frame().await.unwrap() {
            out.push(f);
        }
        out
    }

    #[tokio::test]
    async fn newline_delimited() {
        let got = frames(b"{\"a\":1}\n\n{\"b\":2}\r\n{\"c\":3}").await;
        assert_eq!(got, vec![b"{\"a\":1}".to_vec(), b"{\"b\":2}".to_vec(), b"{\"c\":3}".to_vec()]);
    }

    #[tokio::test]
    async fn content_length_frames() {
        let got = frames(b"Content-Length: 7\r\nContent-Type: x\r\n\r\n{\"a\":1}{\"b\":2}\n").await;
        assert_eq!(got, vec![b"{\"a\":1}".to_vec(), b"{\"b\":2}".to_vec()]);
    }

    #[tokio::test]
    async fn bad_frames_are_errors_and_reading_continues() {
        let mut input = b"content-length: nope\r\n\r\n".to_vec();
        input.extend(vec![b'x'; MAX_FRAME + 10]);
        input.extend(b"\n{}\n");
        let mut r = FrameReader::new(&input[..]);
        assert_eq!(r.next_frame().await.unwrap_err().kind(), io::ErrorKind::InvalidData);
        assert_eq!(r.next_frame().await.unwrap_err().kind(), io::ErrorKind::InvalidData);
        assert_eq!(r.next_frame().await.unwrap(), Some(b"{}".to_vec()));
        assert_eq!(r.next_frame().await.unwrap(), None);
    }
}
