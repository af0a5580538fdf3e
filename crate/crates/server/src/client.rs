//! Minimal streaming client, used by tests and the benchmark's wall-clock mode.

use std::time::Duration;

use anyhow::{bail, Context};
use dictation_core::audio::encode_pcm16_le;
use futures::{SinkExt, StreamExt};
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{MaybeTlsStream, WebSocketStream};

use crate::protocol::{ClientMessage, ServerMessage};

pub struct Client {
    ws: WebSocketStream<MaybeTlsStream<TcpStream>>,
}

impl Client {
    pub async fn connect(url: &str) -> anyhow::Result<Self> {
        let (ws, _) = tokio_tungstenite::connect_async(url)
            .await
            .with_context(|| format!("connecting to {url}"))?;
        Ok(Self { ws })
    }

    pub async fn send_text(&mut self, text: &str) -> anyhow::Result<()> {
        self.ws.send(Message::text(text)).await?;
        Ok(())
    }

    pub async fn send_binary(&mut self, bytes: Vec<u8>) -> anyhow::Result<()> {
        self.ws.send(Message::binary(bytes)).await?;
        Ok(())
    }

    pub async fn start(&mut self, session_id: &str, sample_rate_hz: u32) -> anyhow::Result<()> {
        let msg = ClientMessage::Start {
            session_id: session_id.into(),
            sample_rate_hz,
        };
        self.send_text(&serde_json::to_string(&msg)?).await
    }

    pub async fn send_audio(&mut self, samples: &[i16]) -> anyhow::Result<()> {
        self.send_binary(encode_pcm16_le(samples)).await
    }

    pub async fn end(&mut self) -> anyhow::Result<()> {
        self.send_text(&serde_json::to_string(&ClientMessage::End)?).await
    }

    /// Next server message; `None` once the server closed the socket.
    pub async fn recv(&mut self, timeout: Duration) -> anyhow::Result<Option<ServerMessage>> {
        loop {
            let next = tokio::time::timeout(timeout, self.ws.next())
                .await
                .context("timed out waiting for the server")?;
            match next {
                None | Some(Ok(Message::Close(_))) => return Ok(None),
                Some(Ok(Message::Text(t))) => return Ok(Some(serde_json::from_str(&t)?)),
                Some(Ok(_)) => continue,
                Some(Err(e)) => return Err(e.into()),
            }
        }
    }

    /// Reads until `closed` (inclusive) or the socket ends.
    pub async fn collect(&mut self, timeout: Duration) -> anyhow::Result<Vec<ServerMessage>> {
        let mut out = Vec::new();
        while let Some(msg) = self.recv(timeout).await? {
            let done = msg == ServerMessage::Closed;
            out.push(msg);
            if done {
                break;
            }
        }
        Ok(out)
    }
}

/// Streams `audio` in `chunk_ms` pieces, ends the stream and returns every
/// server message. With `realtime` the chunks are paced at capture speed.
pub async fn stream_session(
    url: &str,
    session_id: &str,
    sample_rate_hz: u32,
    audio: &[i16],
    chunk_ms: u64,
    realtime: bool,
    timeout: Duration,
) -> anyhow::Result<Vec<ServerMessage>> {
    let mut client = Client::connect(url).await?;
    client.start(session_id, sample_rate_hz).await?;
    let chunk = (chunk_ms * u64::from(sample_rate_hz) / 1000).max(1) as usize;
    let mut tick = tokio::time::interval(Duration::from_millis(chunk_ms.max(1)));
    tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    for piece in audio.chunks(chunk) {
        if realtime {
            tick.tick().await;
        }
        client.send_audio(piece).await?;
    }
    client.end().await?;
    let msgs = client.collect(timeout).await?;
    if msgs.last() != Some(&ServerMessage::Closed) {
        bail!("session {session_id} ended without a closed message");
    }
    Ok(msgs)
}
