// FNV-1a over UTF-16 code units. Used to verify that the text on screen is
// byte-for-byte what the service sent (no reordering, no truncation).

export function checksum(text: string): string {
  let hash = 0x811c9dc5;
  for (let i = 0; i < text.length; i++) {
    hash ^= text.charCodeAt(i);
    hash = Math.imul(hash, 0x01000193);
  }
  return (hash >>> 0).toString(16).padStart(8, "0");
}
